"""Combined multi-head prediction, Top-k metrics, and stage heatmaps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch.nn import functional as F

from .config import AugmentConfig
from .data import DatasetManifest, load_batch, make_batches
from .model import PRENet


@dataclass
class CombinedPrediction:
    per_stage_probs: np.ndarray  # (U, num_classes)
    concat_probs: np.ndarray  # (num_classes,)
    combined_scores: np.ndarray  # equal-weight sum over all heads
    predicted_class: int


@dataclass
class MetricsReport:
    top1: float
    top5: float
    per_stage_top1: list[float]
    concat_top1: float
    n_samples: int

    def summary(self) -> str:
        lines = [
            f"samples:       {self.n_samples}",
            f"combined top1: {self.top1:.4f}",
            f"combined top5: {self.top5:.4f}",
            f"concat top1:   {self.concat_top1:.4f}",
        ]
        for i, acc in enumerate(self.per_stage_top1, start=1):
            lines.append(f"stage {i} top1:  {acc:.4f}")
        return "\n".join(lines)


def combined_scores(stage_logits: list[torch.Tensor], concat_logits: torch.Tensor,
                    mode: str = "prob") -> torch.Tensor:
    """Equal-weight sum of all heads' scores (softmax probs by default)."""
    if mode == "prob":
        rows = [F.softmax(l, dim=-1) for l in stage_logits + [concat_logits]]
    elif mode == "logit":
        rows = stage_logits + [concat_logits]
    else:
        raise ValueError(f"unknown combine mode {mode!r}")
    return torch.stack(rows).sum(dim=0)


def predict(model: PRENet, batch: torch.Tensor,
            mode: str = "prob") -> list[CombinedPrediction]:
    """Per-sample combined predictions from all stage heads plus concat."""
    with torch.no_grad():
        outputs = model(batch)
        stage_logits = [b.stage_logits for b in outputs.bundles]
        stage_probs = torch.stack(
            [F.softmax(l, dim=-1) for l in stage_logits], dim=1
        )  # (batch, U, classes)
        concat_probs = F.softmax(outputs.concat_logits, dim=-1)
        scores = combined_scores(stage_logits, outputs.concat_logits, mode)
    predictions = []
    for i in range(batch.shape[0]):
        row = scores[i].numpy()
        predictions.append(CombinedPrediction(
            per_stage_probs=stage_probs[i].numpy(),
            concat_probs=concat_probs[i].numpy(),
            combined_scores=row,
            predicted_class=int(row.argmax()),
        ))
    return predictions


def topk_accuracy(score_rows: np.ndarray | torch.Tensor,
                  labels: np.ndarray | torch.Tensor, k: int) -> float:
    """Fraction of rows whose label is among the k highest scores.

    Ties break toward the lower class index so the metric is deterministic.
    """
    scores = np.asarray(score_rows, dtype=np.float64)
    labels = np.asarray(labels)
    num_classes = scores.shape[-1]
    if k < 1 or k > num_classes:
        raise ValueError(f"k must be in 1..{num_classes}, got {k}")
    if scores.shape[0] == 0:
        return 0.0
    # stable sort on negated scores keeps lower indices first among ties
    ranked = np.argsort(-scores, axis=-1, kind="stable")[:, :k]
    hits = (ranked == labels[:, None]).any(axis=-1)
    return float(hits.mean())


def evaluate(model: PRENet, manifest: DatasetManifest, indices: list[int],
             cfg: AugmentConfig, batch_size: int = 16,
             mode: str = "prob") -> MetricsReport:
    """Stream eval batches and accumulate combined, per-stage, and concat Top-1."""
    if not indices:
        raise ValueError("cannot evaluate an empty split")
    model.eval()
    all_scores = []
    all_stage_probs = []
    all_concat = []
    all_labels = []
    for chunk in make_batches(list(indices), batch_size):
        images, labels = load_batch(manifest, chunk, cfg, train=False)
        with torch.no_grad():
            outputs = model(images)
            stage_logits = [b.stage_logits for b in outputs.bundles]
            all_scores.append(combined_scores(stage_logits, outputs.concat_logits, mode))
            all_stage_probs.append(torch.stack(stage_logits, dim=1))
            all_concat.append(outputs.concat_logits)
            all_labels.append(labels)
    scores = torch.cat(all_scores).numpy()
    stage_rows = torch.cat(all_stage_probs).numpy()  # (n, U, classes)
    concat_rows = torch.cat(all_concat).numpy()
    labels = torch.cat(all_labels).numpy()
    k5 = min(5, scores.shape[-1])
    return MetricsReport(
        top1=topk_accuracy(scores, labels, 1),
        top5=topk_accuracy(scores, labels, k5),
        per_stage_top1=[
            topk_accuracy(stage_rows[:, u], labels, 1)
            for u in range(stage_rows.shape[1])
        ],
        concat_top1=topk_accuracy(concat_rows, labels, 1),
        n_samples=len(labels),
    )


def _normalize_cam(cam: torch.Tensor) -> torch.Tensor:
    cam = cam.clamp_min(0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam


def stage_heatmaps(model: PRENet, image: torch.Tensor,
                   target_class: int | None = None) -> list[np.ndarray]:
    """Gradient-weighted class activation maps, one per stage neck plus the
    final backbone map, each normalized to [0, 1] at input resolution."""
    model.eval()
    batch = image.unsqueeze(0)
    outputs = model(batch)
    stage_logits = [b.stage_logits for b in outputs.bundles]
    scores = combined_scores(stage_logits, outputs.concat_logits)
    if target_class is None:
        target_class = int(scores[0].argmax())
    maps = [b.necked_map for b in outputs.bundles] + [outputs.final_map]
    grads = torch.autograd.grad(scores[0, target_class], maps, allow_unused=False)
    heatmaps = []
    size = image.shape[-2:]
    for fmap, grad in zip(maps, grads):
        weights = grad.mean(dim=(-2, -1), keepdim=True)
        cam = _normalize_cam((weights * fmap).sum(dim=1, keepdim=True))
        cam = F.interpolate(cam, size=size, mode="bilinear", align_corners=False)
        heatmaps.append(cam[0, 0].detach().numpy())
    return heatmaps


def export_heatmaps(model: PRENet, image: torch.Tensor, out_dir: str | Path,
                    stem: str, target_class: int | None = None) -> list[Path]:
    """Write the stage heatmaps as grayscale PNGs named <stem>_<stage>.png."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    heatmaps = stage_heatmaps(model, image, target_class)
    names = [f"stage{i}" for i in range(1, len(heatmaps))] + ["global"]
    paths = []
    for name, cam in zip(names, heatmaps):
        raster = Image.fromarray((cam * 255).astype(np.uint8), mode="L")
        path = out_dir / f"{stem}_{name}.png"
        raster.save(path)
        paths.append(path)
    return paths
