"""Training objectives: per-stage and concat cross-entropy, adjacent-stage
KL diversification, and the balanced total loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch.nn import functional as F

PROB_FLOOR = 1e-12  # keeps log terms finite
NORMALIZATION_TOL = 1e-4


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.8
    beta: float = 0.2

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("loss weights cannot both be zero")


@dataclass
class LossReport:
    per_stage_ce: list[float]
    concat_ce: float
    kl_term: float
    total: float


def stage_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of one head's logits against integer labels."""
    num_classes = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    return F.cross_entropy(logits, labels)


# the concat head uses the identical objective on the fused representation
concat_ce = stage_ce


def _kl_batchmean(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    p = p.clamp_min(PROB_FLOOR)
    q = q.clamp_min(PROB_FLOOR)
    return (p * (p.log() - q.log())).sum(dim=-1).mean()


def pairwise_kl(stage_dists: list[torch.Tensor],
                symmetric: bool = False) -> torch.Tensor:
    """Sum of batchmean KL(y_u || y_{u+1}) over adjacent stage pairs.

    Fewer than two stages gives 0. Rows must already be normalized.
    """
    for i, dist in enumerate(stage_dists):
        sums = dist.sum(dim=-1)
        if dist.numel() and (sums - 1.0).abs().max() > NORMALIZATION_TOL:
            raise ValueError(
                f"stage {i + 1} distribution rows are not normalized "
                f"(max |sum - 1| = {float((sums - 1.0).abs().max()):.3g})"
            )
    if len(stage_dists) < 2:
        first = stage_dists[0] if stage_dists else None
        return torch.zeros((), dtype=first.dtype if first is not None else None)
    total = None
    for p, q in zip(stage_dists, stage_dists[1:]):
        term = _kl_batchmean(p, q)
        if symmetric:
            term = 0.5 * (term + _kl_batchmean(q, p))
        total = term if total is None else total + term
    return total


def total_loss(concat_ce_value: torch.Tensor, kl_value: torch.Tensor,
               weights: LossWeights, literal_sign: bool = False) -> torch.Tensor:
    """Balanced objective alpha * L_con - beta * L_KL.

    The KL term is subtracted so that minimizing the total pushes adjacent
    stage distributions apart; literal_sign=True adds it instead, for
    comparison runs.
    """
    sign = 1.0 if literal_sign else -1.0
    return weights.alpha * concat_ce_value + sign * weights.beta * kl_value
