import numpy as np
import pytest

from hybridattn.numerics import make_rng


@pytest.fixture
def rng():
    return make_rng(12345)


def random_instance(seed, heads, n, d, dtype=np.float64, gated=True):
    """Standard random q/k/v(/g) draw used across the engine tests."""
    r = make_rng(seed)
    shape = (heads, n, d)
    q, k, v = (r.standard_normal(shape).astype(dtype) for _ in range(3))
    g = (1.0 / (1.0 + np.exp(-r.standard_normal(shape)))).astype(dtype) if gated else None
    return q, k, v, g
