"""Staged feature extractors and the backbone registry."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    num_stages_exposed: int
    stage_channels: tuple[int, ...]
    stage_strides: tuple[int, ...]
    pretrained_source: str | None = None

    def __post_init__(self):
        if len(self.stage_channels) != self.num_stages_exposed:
            raise ValueError("stage_channels length must equal num_stages_exposed")
        if len(self.stage_strides) != self.num_stages_exposed:
            raise ValueError("stage_strides length must equal num_stages_exposed")
        if any(a > b for a, b in zip(self.stage_strides, self.stage_strides[1:])):
            raise ValueError("stage_strides must be non-decreasing")


@dataclass(frozen=True)
class StageFeatureMap:
    stage_index: int  # 1-based, shallow to deep
    tensor: torch.Tensor  # (batch, channels, height, width)


class StagedBackbone(nn.Module):
    """Base class: exposes the last U stage activation maps.

    Subclasses set self.spec and implement forward_until. forward_stages
    returns maps shallow to deep; the final map aliases the deepest stage.
    """

    spec: BackboneSpec

    def check_input(self, batch: torch.Tensor) -> None:
        if batch.ndim != 4 or batch.shape[1] != 3:
            raise ValueError(f"expected (batch, 3, h, w) input, got {tuple(batch.shape)}")
        stride = self.spec.stage_strides[-1]
        if batch.shape[-2] < stride or batch.shape[-1] < stride:
            raise ValueError(
                f"input spatial size {tuple(batch.shape[-2:])} smaller than "
                f"stage {self.spec.num_stages_exposed} stride {stride}"
            )

    def forward_until(self, batch: torch.Tensor, stage_index: int) -> torch.Tensor:
        raise NotImplementedError

    def forward_stages(
        self, batch: torch.Tensor
    ) -> tuple[list[StageFeatureMap], StageFeatureMap]:
        self.check_input(batch)
        maps = []
        x = batch
        for i, block in enumerate(self._stage_blocks(), start=1):
            x = block(x)
            maps.append(StageFeatureMap(i, x))
        return maps, maps[-1]

    def _stage_blocks(self) -> list[nn.Module]:
        raise NotImplementedError


class TinyBackbone(StagedBackbone):
    """Three small strided conv stages; fast enough for tests and toy runs."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        blocks = []
        in_ch = 3
        prev_stride = 1
        for ch, total_stride in zip(spec.stage_channels, spec.stage_strides):
            stride = total_stride // prev_stride
            blocks.append(nn.Sequential(
                nn.Conv2d(in_ch, ch, kernel_size=3, stride=stride, padding=1),
                nn.BatchNorm2d(ch),
                nn.ReLU(inplace=True),
            ))
            in_ch = ch
            prev_stride = total_stride
        self.blocks = nn.ModuleList(blocks)

    def _stage_blocks(self) -> list[nn.Module]:
        return list(self.blocks)

    def forward_until(self, batch: torch.Tensor, stage_index: int) -> torch.Tensor:
        self.check_input(batch)
        x = batch
        for block in self.blocks[:stage_index]:
            x = block(x)
        return x


class ResNet50Backbone(StagedBackbone):
    """Standard 50-layer residual network exposing its last three blocks."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        from torchvision.models import resnet50

        self.spec = spec
        net = resnet50(weights=None)
        source = spec.pretrained_source or os.environ.get("PRENET_CACHE")
        if source:
            path = Path(source)
            if path.is_dir():
                path = path / "resnet50.pth"
            if path.is_file():
                net.load_state_dict(torch.load(path, map_location="cpu"))
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1)
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4

    def _stage_blocks(self) -> list[nn.Module]:
        return [nn.Sequential(self.stem, self.layer2), self.layer3, self.layer4]

    def forward_until(self, batch: torch.Tensor, stage_index: int) -> torch.Tensor:
        self.check_input(batch)
        x = self.layer2(self.stem(batch))
        if stage_index >= 2:
            x = self.layer3(x)
        if stage_index >= 3:
            x = self.layer4(x)
        return x


_REGISTRY: dict[str, tuple[BackboneSpec, type]] = {}


def register_backbone(spec: BackboneSpec, constructor) -> None:
    if spec.name in _REGISTRY:
        raise ValueError(f"backbone {spec.name!r} is already registered")
    _REGISTRY[spec.name] = (spec, constructor)


def get_backbone_spec(name: str) -> BackboneSpec:
    _require(name)
    return _REGISTRY[name][0]


def create_backbone(name: str) -> StagedBackbone:
    _require(name)
    spec, constructor = _REGISTRY[name]
    return constructor(spec)


def registered_backbones() -> list[str]:
    return sorted(_REGISTRY)


def _require(name: str) -> None:
    if name not in _REGISTRY:
        raise KeyError(
            f"unknown backbone {name!r}; registered: {registered_backbones()}"
        )


register_backbone(
    BackboneSpec("tiny3", 3, (8, 16, 32), (2, 4, 8)),
    TinyBackbone,
)
register_backbone(
    BackboneSpec("resnet50", 3, (512, 1024, 2048), (8, 16, 32)),
    ResNet50Backbone,
)
