"""Progressive S+1-pass training loop, LR schedule, and checkpointing."""

from __future__ import annotations

import csv
import math
import os
import random
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch.nn import functional as F

from . import losses
from .config import AttentionConfig, ConfigError, RunConfig
from .data import DatasetManifest, SplitManifest, load_batch, make_batches
from .model import PRENet

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class PassSpec:
    scope: tuple[int, ...]  # stage indices on this pass's forward path
    loss: str  # "stage" or "total"


@dataclass(frozen=True)
class ProgressiveSchedule:
    num_stages: int  # U
    num_steps: int  # S
    passes: tuple[PassSpec, ...]


def make_schedule(num_stages: int, num_steps: int) -> ProgressiveSchedule:
    """Nested-scope schedule: pass s covers stages 1..(U-S+s), plus a final
    whole-network pass trained with the balanced total loss."""
    if num_steps < 1 or num_stages < 1:
        raise ValueError("num_stages and num_steps must be >= 1")
    if num_steps > num_stages:
        raise ValueError(
            f"num_steps ({num_steps}) must not exceed num_stages ({num_stages})"
        )
    passes = [
        PassSpec(tuple(range(1, num_stages - num_steps + s + 1)), "stage")
        for s in range(1, num_steps + 1)
    ]
    passes.append(PassSpec(tuple(range(1, num_stages + 1)), "total"))
    return ProgressiveSchedule(num_stages, num_steps, tuple(passes))


def lr_at(epoch: int, cfg: RunConfig) -> float:
    """base_lr decayed by lr_decay every lr_decay_epochs epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.base_lr * cfg.lr_decay ** (epoch // cfg.lr_decay_epochs)


@dataclass
class BatchReport:
    pass_losses: list[float]  # optimized loss of each of the S+1 passes
    report: losses.LossReport


def _check_finite(value: torch.Tensor, pass_index: int) -> None:
    if not torch.isfinite(value):
        raise RuntimeError(
            f"non-finite loss {float(value)} on pass {pass_index + 1}"
        )


def train_batch(model: PRENet, images: torch.Tensor, labels: torch.Tensor,
                schedule: ProgressiveSchedule, optimizer: torch.optim.Optimizer,
                weights: losses.LossWeights,
                kl_literal_sign: bool = False,
                kl_symmetric: bool = False,
                passes: tuple[PassSpec, ...] | None = None) -> BatchReport:
    """Run the S+1 sequential forward/backward/update passes on one batch.

    Each stage pass backpropagates that scope's deepest classifier only, so
    parameters outside the scope never enter the graph; the final pass trains
    the whole network with the balanced total loss.
    """
    if schedule.num_stages != model.num_stages:
        raise ValueError(
            f"schedule has {schedule.num_stages} stages, model has {model.num_stages}"
        )
    pass_losses: list[float] = []
    report = None
    for pass_index, spec in enumerate(passes or schedule.passes):
        optimizer.zero_grad(set_to_none=True)
        if spec.loss == "stage":
            logits = model.stage_logits(images, max(spec.scope))
            loss = losses.stage_ce(logits, labels)
        else:
            outputs = model(images)
            concat = losses.concat_ce(outputs.concat_logits, labels)
            dists = [F.softmax(b.stage_logits, dim=-1) for b in outputs.bundles]
            kl = losses.pairwise_kl(dists, symmetric=kl_symmetric)
            loss = losses.total_loss(concat, kl, weights, literal_sign=kl_literal_sign)
            report = losses.LossReport(
                per_stage_ce=[
                    float(losses.stage_ce(b.stage_logits.detach(), labels))
                    for b in outputs.bundles
                ],
                concat_ce=float(concat.detach()),
                kl_term=float(kl.detach()),
                total=float(loss.detach()),
            )
        _check_finite(loss, pass_index)
        loss.backward()
        optimizer.step()
        pass_losses.append(float(loss.detach()))
    if report is None:
        report = losses.LossReport([], math.nan, math.nan, math.nan)
    return BatchReport(pass_losses, report)


def build_model(cfg: RunConfig, num_classes: int) -> PRENet:
    return PRENet(
        cfg.backbone,
        num_classes,
        neck_dim=cfg.neck_dim,
        attention=cfg.attention_config(),
    )


def save_checkpoint(path: str | Path, model: PRENet,
                    optimizer: torch.optim.Optimizer, cfg: RunConfig,
                    epoch: int, class_names: list[str],
                    best_val_top1: float) -> None:
    """Atomic checkpoint write (temp file then rename)."""
    path = Path(path)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "epoch": epoch,
        "torch_rng_state": torch.get_rng_state(),
        "python_rng_state": random.getstate(),
        "config": cfg.to_dict(),
        "num_classes": model.num_classes,
        "class_names": class_names,
        "best_val_top1": best_val_top1,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise RuntimeError(f"corrupt checkpoint {path}: {exc}") from exc
    version = payload.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise RuntimeError(
            f"checkpoint schema_version {version} != {CHECKPOINT_SCHEMA_VERSION}"
        )
    return payload


def load_model(path: str | Path,
               num_classes: int | None = None) -> tuple[PRENet, RunConfig, dict]:
    """Rebuild a model from a checkpoint; returns (model, config, payload)."""
    payload = load_checkpoint(path)
    cfg = RunConfig.from_dict(payload["config"])
    if num_classes is not None and num_classes != payload["num_classes"]:
        raise ValueError(
            f"checkpoint was trained with {payload['num_classes']} classes, "
            f"requested {num_classes}"
        )
    model = build_model(cfg, payload["num_classes"])
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, cfg, payload


@dataclass
class EpochStats:
    epoch: int
    pass_losses: list[float]  # per-pass means over the epoch
    train_ce: float  # mean over stages of per-stage CE
    concat_ce: float
    kl: float
    total: float
    val_top1: float
    val_top5: float
    lr: float


@dataclass
class TrainingLog:
    epochs: list[EpochStats] = field(default_factory=list)
    batch_reports: list[BatchReport] = field(default_factory=list)
    best_val_top1: float = 0.0
    best_checkpoint: str = ""
    last_checkpoint: str = ""
    metrics_csv: str = ""


def _epoch_passes(schedule: ProgressiveSchedule, epoch: int) -> tuple[PassSpec, ...]:
    # epoch-phased curriculum: one pass of the schedule per epoch, cycling
    return (schedule.passes[epoch % len(schedule.passes)],)


def fit(cfg: RunConfig, manifest: DatasetManifest, split: SplitManifest,
        resume: str | Path | None = None) -> TrainingLog:
    """Full training run: epoch loop, per-epoch validation, best checkpoint."""
    from .evaluation import evaluate  # late import avoids a cycle

    if not split.train:
        raise ValueError("training split is empty")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schedule = make_schedule(cfg.num_stages, cfg.steps)
    weights = losses.LossWeights(cfg.alpha, cfg.beta)
    aug_cfg = cfg.augment_config()

    torch.manual_seed(cfg.seed)
    start_epoch = 0
    best_val_top1 = 0.0
    if resume is not None:
        model, _, payload = load_model(resume)
        if payload["num_classes"] != manifest.num_classes:
            raise ValueError(
                f"checkpoint has {payload['num_classes']} classes, "
                f"dataset has {manifest.num_classes}"
            )
        model.train()
        optimizer = _make_optimizer(model, cfg)
        optimizer.load_state_dict(payload["optimizer_state"])
        torch.set_rng_state(payload["torch_rng_state"])
        random.setstate(payload["python_rng_state"])
        start_epoch = payload["epoch"] + 1
        best_val_top1 = payload["best_val_top1"]
    else:
        model = build_model(cfg, manifest.num_classes)
        optimizer = _make_optimizer(model, cfg)

    log = TrainingLog(best_val_top1=best_val_top1)
    csv_path = out_dir / "metrics.csv"
    log.metrics_csv = str(csv_path)
    n_passes = len(schedule.passes)
    write_header = not (resume is not None and csv_path.exists())
    csv_mode = "a" if not write_header else "w"
    with open(csv_path, csv_mode, newline="") as fh:
        writer = csv.writer(fh)
        if write_header:
            writer.writerow(
                ["epoch"]
                + [f"pass_{i + 1}" for i in range(n_passes)]
                + ["train_ce", "concat_ce", "kl", "total",
                   "val_top1", "val_top5", "lr"]
            )
        for epoch in range(start_epoch, start_epoch + cfg.epochs):
            lr = lr_at(epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            model.train()
            epoch_passes = (
                _epoch_passes(schedule, epoch)
                if cfg.progressive_mode == "epoch" else None
            )
            batches = make_batches(
                list(split.train), cfg.batch_size,
                shuffle_seed=cfg.seed, epoch=epoch,
            )
            aug_rng = random.Random(f"{cfg.seed}:aug:{epoch}")
            sums = None
            count = 0
            for indices in batches:
                images, labels = load_batch(
                    manifest, indices, aug_cfg, train=True, rng=aug_rng
                )
                batch_report = train_batch(
                    model, images, labels, schedule, optimizer, weights,
                    kl_literal_sign=cfg.kl_literal_sign,
                    kl_symmetric=cfg.kl_symmetric,
                    passes=epoch_passes,
                )
                log.batch_reports.append(batch_report)
                values = batch_report.pass_losses + [
                    (sum(batch_report.report.per_stage_ce)
                     / max(1, len(batch_report.report.per_stage_ce))),
                    batch_report.report.concat_ce,
                    batch_report.report.kl_term,
                    batch_report.report.total,
                ]
                sums = values if sums is None else [a + b for a, b in zip(sums, values)]
                count += 1
            means = [s / count for s in sums]
            model.eval()
            if split.val:
                val = evaluate(model, manifest, list(split.val), cfg.eval_config(),
                               batch_size=cfg.batch_size)
                val_top1, val_top5 = val.top1, val.top5
            else:
                val_top1 = val_top5 = math.nan
            n_loss_cols = len(means) - 4 if epoch_passes is None else 1
            pass_cols = means[:n_loss_cols] + [math.nan] * (n_passes - n_loss_cols)
            stats = EpochStats(
                epoch=epoch,
                pass_losses=means[:-4],
                train_ce=means[-4],
                concat_ce=means[-3],
                kl=means[-2],
                total=means[-1],
                val_top1=val_top1,
                val_top5=val_top5,
                lr=lr,
            )
            log.epochs.append(stats)
            writer.writerow(
                [epoch]
                + [f"{v:.6f}" for v in pass_cols]
                + [f"{stats.train_ce:.6f}", f"{stats.concat_ce:.6f}",
                   f"{stats.kl:.6f}", f"{stats.total:.6f}",
                   f"{val_top1:.4f}", f"{val_top5:.4f}", f"{lr:.8f}"]
            )
            fh.flush()
            last_path = out_dir / "last.pt"
            save_checkpoint(last_path, model, optimizer, cfg, epoch,
                            manifest.class_names, log.best_val_top1)
            log.last_checkpoint = str(last_path)
            if not split.val or val_top1 >= log.best_val_top1:
                log.best_val_top1 = val_top1 if split.val else 0.0
                best_path = out_dir / "best.pt"
                save_checkpoint(best_path, model, optimizer, cfg, epoch,
                                manifest.class_names, log.best_val_top1)
                log.best_checkpoint = str(best_path)
    return log


def _make_optimizer(model: PRENet, cfg: RunConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(
        model.parameters(), lr=cfg.base_lr,
        momentum=cfg.momentum, weight_decay=cfg.weight_decay,
    )
