import numpy as np
import pytest

from xdk.autodiff import Tensor
from xdk.model import ModelConfig, TransducerModel


def tiny_config(kind: str, dtype: str = "f64") -> ModelConfig:
    return ModelConfig(encoder_kind=kind, num_encoder_layers=2, d_model=8,
                       num_heads=2, d_pred=6, d_joint=7, vocab_size=4,
                       input_dim=5, max_positions=16, dtype=dtype)


def tiny_model(kind: str = "lstm", seed: int = 0, dtype: str = "f64") -> TransducerModel:
    return TransducerModel(tiny_config(kind, dtype), seed=seed)


def random_lattice(rng, tlen: int, ulen: int, vocab: int) -> np.ndarray:
    """Valid log-prob lattice: rows normalize to 1 in probability space."""
    return np.log(rng.dirichlet(np.ones(vocab + 1), size=(tlen, ulen + 1)))


@pytest.fixture
def rng():
    return np.random.default_rng(0xD5)


def features(rng, tlen: int, dim: int = 5, dtype=np.float64) -> Tensor:
    return Tensor(rng.normal(size=(tlen, dim)), dtype=dtype)
