import numpy as np
import pytest

from kvcompose.model import ModelConfig, init_model
from kvcompose.numerics import SeededRng


@pytest.fixture
def tiny_model():
    return init_model(
        ModelConfig(
            layers=2,
            query_heads=4,
            kv_heads=2,
            model_dim=32,
            head_dim=8,
            vocab_size=64,
            seed=7,
        )
    )


def random_context(seed: int, length: int, vocab: int = 64) -> list[int]:
    rng = SeededRng(seed)
    return [rng.randint(vocab) for _ in range(length)]


def random_matrix(seed: int, rows: int, cols: int) -> np.ndarray:
    rng = SeededRng(seed)
    return (rng.uniform_block(rows * cols) * 2.0 - 1.0).reshape(rows, cols)
