import pytest
import torch

from cacheformer.config import ModelConfig


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(n=32, d=16, h=2, w=8, s=4, r=16, k=2, u=3, p_avg=8, layers=1, vocab=256)


@pytest.fixture
def base_config() -> ModelConfig:
    """Sequence 1024, window 128, segment 16, projection 256, top-5 with u=3, averaging 32 rows."""
    return ModelConfig(n=1024, d=768, h=12, w=128, s=16, r=256, k=5, u=3, p_avg=32, layers=12)


@pytest.fixture
def gen() -> torch.Generator:
    return torch.Generator().manual_seed(1234)
