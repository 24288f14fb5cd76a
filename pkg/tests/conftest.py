import numpy as np
import pytest

from synlm import tape as T


@pytest.fixture
def f64():
    """Run a test at 64-bit default precision, restoring afterwards."""
    prev = T.default_dtype()
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(prev)


@pytest.fixture(autouse=True)
def _reset_dtype():
    prev = T.default_dtype()
    yield
    T.set_default_dtype(prev)
