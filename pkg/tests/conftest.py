import numpy as np
import pytest

from combogait.config import DataConfig, ModelConfig
from combogait.data import generate_dataset


def tiny_config(**overrides) -> ModelConfig:
    """A 16x12 input model small enough for per-test forward passes."""
    base = dict(
        height=16,
        width=12,
        sil_channels=(2, 3, 4),
        smpl_hidden=(8, 8),
        smpl_embed=16,
        token_dim=8,
        n_heads=2,
        n_blocks=2,
        gait_dim=6,
        direct_hidden=8,
        n_train_ids=3,
        init_seed=5,
    )
    base.update(overrides)
    return ModelConfig(**base)


def tiny_inputs(rng, b=2, t=3, cfg=None):
    cfg = cfg or tiny_config()
    sil = (rng.random((b, t, cfg.height, cfg.width)) < 0.4).astype(np.uint8)
    smpl = rng.standard_normal((b, t, 82)).astype(np.float32) * 0.3
    return sil, smpl


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(DataConfig(seed=3, subjects=4, sequences_per_subject=3, frames=12, test_sequences=1))
