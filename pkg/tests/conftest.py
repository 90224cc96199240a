import numpy as np
import pytest

from spikessm.tensor import dtype_scope


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def f64():
    """Run the test body at 64-bit precision (gradient-check mode)."""
    with dtype_scope("float64"):
        yield
