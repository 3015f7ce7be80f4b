import pytest
import torch

from dag.data import SyntheticConfig, load_manifest
from dag.run_config import RunConfig
from dag.trainer import make_synthetic, train

TINY = dict(
    d=16, d_txt=8, d_img=8, d_p=16,
    pyramid_channels=[4, 8, 8], level_sizes=[64, 16], point_channels=[16, 32], radii=[0.3, 0.6], nsample=8,
    pooling_m=2, prompt_count=2, caption_tokens=2, image_size=32, batch_size=4,
    learning_rate=1e-3, epochs=1000, log_every=5,
)


def tiny_config(**overrides) -> RunConfig:
    return RunConfig(**{**TINY, **overrides})


@pytest.fixture(autouse=True)
def no_seed_override(monkeypatch):
    monkeypatch.delenv("DAG_SEED", raising=False)


@pytest.fixture
def config():
    return tiny_config(max_steps=10)


@pytest.fixture(scope="session")
def synthetic_manifest_path(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    return make_synthetic(SyntheticConfig(n_points=128, image_size=32, region_radius=1.0, seed=3), 4, out)


@pytest.fixture
def synthetic_manifest(synthetic_manifest_path):
    return load_manifest(synthetic_manifest_path)


@pytest.fixture(scope="session")
def trained(tmp_path_factory, synthetic_manifest_path):
    """A ten-step run on the tiny synthetic set, shared by checkpoint consumers."""
    out = tmp_path_factory.mktemp("run")
    return train(tiny_config(max_steps=10), load_manifest(synthetic_manifest_path), out)


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(0)
