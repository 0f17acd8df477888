import numpy as np
import pytest
import torch

from tbseg import DatasetSpec, ModelConfig, generate_dataset

torch.set_num_threads(1)


def tiny_model_config(**overrides) -> ModelConfig:
    """Smallest config that still exercises every architectural piece."""
    base = dict(
        num_classes=3,
        embed_dim=8,
        depths=(1, 1, 1, 1),
        num_heads=(1, 1, 2, 2),
        window_size=4,
        spatial_channels=(8, 8, 16),
        context_channels=16,
        fusion_channels=32,
        head_mid_channels=8,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def toy_clips():
    spec = DatasetSpec(num_clips=2, frames_per_clip=12, height=64, width=64,
                       num_classes=4, seed=0)
    return generate_dataset(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
