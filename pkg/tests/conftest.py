import numpy as np
import pytest

from granular_ot.model import ModelConfig, SlideModel
from granular_ot.synthetic import Level, PatchBag

TOY_DIMS = dict(classes=2, d=4, M=2, K=2, N_p=3, context_len=2, token_dim=3)


def toy_bag(seed=0, d=4, label=1, signal=0.0):
    """Six low patches on a 2 x 3 grid and six high patches on a 3 x 2 grid."""
    rng = np.random.default_rng(seed)
    low = np.array([(r, c) for r in range(2) for c in range(3)])
    high = np.array([(r, c) for r in range(3) for c in range(2)])
    shift = np.zeros(d)
    shift[label % d] = signal
    return PatchBag(
        f"toy{seed}",
        label,
        Level(rng.normal(size=(6, d)) + shift, low),
        Level(rng.normal(size=(6, d)) + shift, high),
    )


def toy_model(seed=0, symmetric=False, **overrides):
    cfg = ModelConfig(**{**TOY_DIMS, **overrides})
    return SlideModel.init(cfg, np.random.default_rng(seed), encoder_seed=seed, symmetric=symmetric)


@pytest.fixture
def bag():
    return toy_bag()


@pytest.fixture
def model():
    return toy_model()
