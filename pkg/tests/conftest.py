import pytest
import torch

from prenet import AttentionConfig, PRENet, RunConfig, build_manifest, split_manifest
from prenet.toydata import generate_toy_dataset


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_dataset")
    return generate_toy_dataset(root, per_class=32, side=64, seed=0)


@pytest.fixture(scope="session")
def toy_manifest(toy_root):
    return build_manifest(toy_root)


@pytest.fixture(scope="session")
def toy_split(toy_manifest):
    return split_manifest(toy_manifest, seed=0)


def toy_run_config(toy_root, out_dir, **overrides) -> RunConfig:
    values = dict(
        data_root=str(toy_root),
        out_dir=str(out_dir),
        backbone="tiny3",
        neck_dim=16,
        token_grid=2,
        attn_dim=8,
        epochs=2,
        batch_size=16,
        base_lr=0.02,
        resize_side=72,
        crop_side=64,
        seed=0,
    )
    values.update(overrides)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return PRENet("tiny3", 4, neck_dim=16,
                  attention=AttentionConfig(token_grid=2, attn_dim=8))
