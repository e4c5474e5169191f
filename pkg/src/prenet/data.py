"""Dataset manifest, deterministic splits, and image preprocessing."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

import torch
from PIL import Image
from torchvision.transforms import functional as TF

from .config import AugmentConfig

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".webp"}
SPLIT_RATIOS = (0.6, 0.1, 0.3)
MANIFEST_SCHEMA_VERSION = 1


class DatasetError(ValueError):
    """Raised for unusable dataset layouts or unreadable images."""


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    class_id: int
    class_name: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    num_classes: int
    root: str

    @property
    def class_names(self) -> list[str]:
        names: dict[int, str] = {}
        for e in self.entries:
            names[e.class_id] = e.class_name
        return [names[i] for i in range(self.num_classes)]


@dataclass(frozen=True)
class SplitManifest:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    seed: int
    ratios: tuple[float, float, float] = SPLIT_RATIOS

    def indices(self, name: str) -> tuple[int, ...]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}, expected train/val/test")
        return getattr(self, name)


def build_manifest(root_dir: str | Path) -> DatasetManifest:
    """Enumerate a directory-of-classes corpus into a manifest.

    Class ids follow lexicographically sorted directory names; entries are
    sorted by path within each class.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DatasetError(f"dataset root is not a directory: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DatasetError(f"dataset root has no class directories: {root}")
    entries: list[ManifestEntry] = []
    for class_id, class_dir in enumerate(class_dirs):
        images = sorted(
            p for p in class_dir.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not images:
            raise DatasetError(f"class directory has no images: {class_dir}")
        for p in images:
            entries.append(ManifestEntry(str(p), class_id, class_dir.name))
    return DatasetManifest(tuple(entries), len(class_dirs), str(root))


def split_manifest(manifest: DatasetManifest, seed: int) -> SplitManifest:
    """Deterministic per-class 60/10/30 split.

    Each class is shuffled by an RNG keyed on (seed, class_id). Classes with
    fewer than 3 images put everything in train so no class trains empty.
    """
    if not manifest.entries:
        raise DatasetError("cannot split an empty manifest")
    by_class: dict[int, list[int]] = {}
    for idx, entry in enumerate(manifest.entries):
        by_class.setdefault(entry.class_id, []).append(idx)
    train: list[int] = []
    val: list[int] = []
    test: list[int] = []
    for class_id in sorted(by_class):
        indices = list(by_class[class_id])
        random.Random(f"{seed}:{class_id}").shuffle(indices)
        n = len(indices)
        if n < 3:
            train.extend(indices)
            continue
        # cumulative rounding keeps every part within +-1 of its ratio
        n_train = round(n * SPLIT_RATIOS[0])
        n_val = round(n * (SPLIT_RATIOS[0] + SPLIT_RATIOS[1])) - n_train
        train.extend(indices[:n_train])
        val.extend(indices[n_train:n_train + n_val])
        test.extend(indices[n_train + n_val:])
    return SplitManifest(tuple(train), tuple(val), tuple(test), seed)


def save_manifest(manifest: DatasetManifest, split: SplitManifest | None,
                  path: str | Path) -> None:
    payload = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "root": manifest.root,
        "num_classes": manifest.num_classes,
        "entries": [
            {"path": e.image_path, "class_id": e.class_id, "class_name": e.class_name}
            for e in manifest.entries
        ],
    }
    if split is not None:
        payload["split"] = {
            "seed": split.seed,
            "ratios": list(split.ratios),
            "train": list(split.train),
            "val": list(split.val),
            "test": list(split.test),
        }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def load_manifest(path: str | Path) -> tuple[DatasetManifest, SplitManifest | None]:
    with open(path) as fh:
        payload = json.load(fh)
    version = payload.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise DatasetError(
            f"manifest schema_version {version} != {MANIFEST_SCHEMA_VERSION}"
        )
    entries = tuple(
        ManifestEntry(e["path"], e["class_id"], e["class_name"])
        for e in payload["entries"]
    )
    manifest = DatasetManifest(entries, payload["num_classes"], payload["root"])
    split = None
    if "split" in payload:
        s = payload["split"]
        split = SplitManifest(
            tuple(s["train"]), tuple(s["val"]), tuple(s["test"]),
            s["seed"], tuple(s["ratios"]),
        )
    return manifest, split


def load_image(path: str | Path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (OSError, SyntaxError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc


def _resize(image: Image.Image, cfg: AugmentConfig) -> Image.Image:
    if cfg.keep_aspect:
        w, h = image.size
        scale = cfg.resize_side / min(w, h)
        size = (max(1, round(w * scale)), max(1, round(h * scale)))
    else:
        size = (cfg.resize_side, cfg.resize_side)
    return image.resize(size, Image.BILINEAR)


def _finalize(image: Image.Image, cfg: AugmentConfig) -> torch.Tensor:
    tensor = TF.to_tensor(image)
    return TF.normalize(tensor, list(cfg.mean), list(cfg.std))


def augment_train(image: Image.Image, cfg: AugmentConfig,
                  rng: random.Random) -> torch.Tensor:
    """Training-time preprocessing: resize, random crop, flip, color jitter."""
    image = _resize(image.convert("RGB"), cfg)
    w, h = image.size
    left = rng.randint(0, w - cfg.crop_side) if w > cfg.crop_side else 0
    top = rng.randint(0, h - cfg.crop_side) if h > cfg.crop_side else 0
    image = image.crop((left, top, left + cfg.crop_side, top + cfg.crop_side))
    if rng.random() < cfg.hflip_prob:
        image = image.transpose(Image.FLIP_LEFT_RIGHT)
    db, dc, ds = cfg.color_jitter
    if db > 0:
        image = TF.adjust_brightness(image, 1.0 + rng.uniform(-db, db))
    if dc > 0:
        image = TF.adjust_contrast(image, 1.0 + rng.uniform(-dc, dc))
    if ds > 0:
        image = TF.adjust_saturation(image, 1.0 + rng.uniform(-ds, ds))
    return _finalize(image, cfg)


def preprocess_eval(image: Image.Image, cfg: AugmentConfig) -> torch.Tensor:
    """Deterministic eval preprocessing: resize then center crop."""
    image = _resize(image.convert("RGB"), cfg)
    w, h = image.size
    left = (w - cfg.crop_side) // 2
    top = (h - cfg.crop_side) // 2
    image = image.crop((left, top, left + cfg.crop_side, top + cfg.crop_side))
    return _finalize(image, cfg)


def make_batches(items: list, batch_size: int, shuffle_seed: int | None = None,
                 epoch: int = 0) -> list[list]:
    """Chunk items into batches, optionally in a seeded per-epoch order.

    The final partial batch is kept. Without a shuffle seed the input order
    is preserved.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = list(items)
    if shuffle_seed is not None:
        random.Random(f"{shuffle_seed}:{epoch}").shuffle(order)
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def load_batch(manifest: DatasetManifest, indices: list[int], cfg: AugmentConfig,
               train: bool = False,
               rng: random.Random | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Load and preprocess manifest entries into an image stack and label vector."""
    if train and rng is None:
        raise ValueError("training-time loading requires an rng")
    images = []
    labels = []
    for idx in indices:
        entry = manifest.entries[idx]
        img = load_image(entry.image_path)
        if train:
            images.append(augment_train(img, cfg, rng))
        else:
            images.append(preprocess_eval(img, cfg))
        labels.append(entry.class_id)
    if not images:
        side = cfg.crop_side
        return torch.zeros(0, 3, side, side), torch.zeros(0, dtype=torch.long)
    return torch.stack(images), torch.tensor(labels, dtype=torch.long)
