"""PRENet head: global branch, stage necks, cross-stage attention, classifiers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .backbone import StagedBackbone, StageFeatureMap, create_backbone
from .config import AttentionConfig


@dataclass
class StageBundle:
    stage_index: int
    necked_map: torch.Tensor  # (batch, D, h, w)
    pooled: torch.Tensor  # (batch, D), global max of the necked map
    enhanced: torch.Tensor  # (batch, D), attention-enhanced descriptor
    stage_logits: torch.Tensor  # (batch, num_classes)


@dataclass
class ForwardOutputs:
    global_vec: torch.Tensor  # (batch, C_g)
    bundles: list[StageBundle]
    fused: torch.Tensor  # (batch, C_g + U * D)
    concat_logits: torch.Tensor  # (batch, num_classes)
    final_map: torch.Tensor  # deepest backbone map, kept for visualization


def global_descriptor(final_map: StageFeatureMap | torch.Tensor) -> torch.Tensor:
    """Per-channel spatial mean of the deepest feature map."""
    tensor = final_map.tensor if isinstance(final_map, StageFeatureMap) else final_map
    return tensor.mean(dim=(-2, -1))


def global_max_pool(spatial_map: torch.Tensor) -> torch.Tensor:
    """Per-channel spatial max."""
    return spatial_map.amax(dim=(-2, -1))


def fuse(global_vec: torch.Tensor, enhanced: list[torch.Tensor]) -> torch.Tensor:
    """Concatenate (global, stage 1, ..., stage U) descriptors."""
    for e in enhanced:
        if e.shape[0] != global_vec.shape[0]:
            raise ValueError(
                f"batch mismatch: global {global_vec.shape[0]} vs stage {e.shape[0]}"
            )
    return torch.cat([global_vec, *enhanced], dim=1)


class StageNeck(nn.Module):
    """1x1 conv -> batch norm -> ReLU adapter to the common width D."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=1)
        self.bn = nn.BatchNorm2d(out_channels)

    def forward(self, spatial_map: torch.Tensor) -> torch.Tensor:
        if spatial_map.shape[1] != self.in_channels:
            raise ValueError(
                f"neck expects {self.in_channels} channels, got {spatial_map.shape[1]}"
            )
        return F.relu(self.bn(self.conv(spatial_map)))


class RegionEnhance(nn.Module):
    """Cross-stage scaled-dot-product attention over pooled spatial tokens.

    Each stage map is adaptively pooled to a t x t token grid; keys and
    values span the concatenated sequence of all stages so features interact
    across space and scales. Key/value projections are shared across stages.
    """

    def __init__(self, dim: int, cfg: AttentionConfig):
        super().__init__()
        self.dim = dim
        self.token_grid = cfg.token_grid
        self.attn_dim = cfg.attn_dim
        self.residual = cfg.residual
        self.query = nn.Linear(dim, cfg.attn_dim)
        self.key = nn.Linear(dim, cfg.attn_dim)
        self.value = nn.Linear(dim, cfg.attn_dim)
        self.out = nn.Linear(cfg.attn_dim, dim)

    def tokens(self, necked_maps: list[torch.Tensor]) -> list[torch.Tensor]:
        """Pool each map to t x t and flatten to (batch, t*t, D) token rows."""
        toks = []
        for m in necked_maps:
            if m.shape[1] != self.dim:
                raise ValueError(
                    f"attention expects width {self.dim}, got {m.shape[1]}"
                )
            pooled = F.adaptive_avg_pool2d(m, self.token_grid)
            toks.append(pooled.flatten(2).transpose(1, 2))
        return toks

    def attention_weights(self, stage_tokens: torch.Tensor,
                          all_tokens: torch.Tensor) -> torch.Tensor:
        q = self.query(stage_tokens)
        k = self.key(all_tokens)
        scores = q @ k.transpose(1, 2) / math.sqrt(self.attn_dim)
        return torch.softmax(scores, dim=-1)

    def forward_tokens(self, tokens: list[torch.Tensor]) -> list[torch.Tensor]:
        """Per-stage enhanced token sequences (pre-pooling)."""
        sequence = torch.cat(tokens, dim=1)
        v = self.value(sequence)
        outputs = []
        for stage_tokens in tokens:
            weights = self.attention_weights(stage_tokens, sequence)
            enhanced = self.out(weights @ v)
            if self.residual:
                enhanced = enhanced + stage_tokens
            outputs.append(enhanced)
        return outputs

    def forward(self, necked_maps: list[torch.Tensor]) -> list[torch.Tensor]:
        outputs = self.forward_tokens(self.tokens(necked_maps))
        return [o.amax(dim=1) for o in outputs]


def _classifier_head(in_dim: int, hidden: int, num_classes: int) -> nn.Sequential:
    # two fully-connected layers with batch norm and ELU in between
    return nn.Sequential(
        nn.Linear(in_dim, hidden),
        nn.BatchNorm1d(hidden),
        nn.ELU(inplace=True),
        nn.Linear(hidden, num_classes),
    )


class PRENet(nn.Module):
    """Progressive region enhancement network for fine-grained recognition."""

    def __init__(self, backbone: StagedBackbone | str, num_classes: int,
                 neck_dim: int = 512,
                 attention: AttentionConfig | None = None):
        super().__init__()
        if isinstance(backbone, str):
            backbone = create_backbone(backbone)
        if num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {num_classes}")
        attention = attention or AttentionConfig()
        self.backbone = backbone
        self.num_classes = num_classes
        self.neck_dim = neck_dim
        self.num_stages = backbone.spec.num_stages_exposed
        self.global_dim = backbone.spec.stage_channels[-1]
        self.necks = nn.ModuleList(
            StageNeck(ch, neck_dim) for ch in backbone.spec.stage_channels
        )
        self.enhance = RegionEnhance(neck_dim, attention)
        self.stage_heads = nn.ModuleList(
            _classifier_head(neck_dim, neck_dim, num_classes)
            for _ in range(self.num_stages)
        )
        fused_dim = self.global_dim + self.num_stages * neck_dim
        self.concat_head = _classifier_head(fused_dim, neck_dim, num_classes)

    def forward(self, batch: torch.Tensor) -> ForwardOutputs:
        stage_maps, final_map = self.backbone.forward_stages(batch)
        global_vec = global_descriptor(final_map)
        necked = [neck(m.tensor) for neck, m in zip(self.necks, stage_maps)]
        pooled = [global_max_pool(m) for m in necked]
        enhanced = self.enhance(necked)
        fused = fuse(global_vec, enhanced)
        concat_logits = self.concat_head(fused)
        bundles = [
            StageBundle(
                stage_index=i + 1,
                necked_map=necked[i],
                pooled=pooled[i],
                enhanced=enhanced[i],
                stage_logits=self.stage_heads[i](pooled[i]),
            )
            for i in range(self.num_stages)
        ]
        return ForwardOutputs(global_vec, bundles, fused, concat_logits,
                              final_map.tensor)

    def stage_logits(self, batch: torch.Tensor, stage_index: int) -> torch.Tensor:
        """Logits of one stage head, running only that stage's forward path.

        Used by the progressive trainer so parameters outside the pass scope
        stay out of the graph entirely.
        """
        if not 1 <= stage_index <= self.num_stages:
            raise ValueError(f"stage_index {stage_index} not in 1..{self.num_stages}")
        fmap = self.backbone.forward_until(batch, stage_index)
        pooled = global_max_pool(self.necks[stage_index - 1](fmap))
        return self.stage_heads[stage_index - 1](pooled)

    def all_logits(self, outputs: ForwardOutputs) -> list[torch.Tensor]:
        """Stage logits (shallow to deep) followed by the concat logits."""
        return [b.stage_logits for b in outputs.bundles] + [outputs.concat_logits]
