import numpy as np
import pytest

from uae import _kernels


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    """Run a test once per kernel backend."""
    if request.param == "numba" and not _kernels.HAVE_NUMBA:
        pytest.skip("numba not installed")
    previous = _kernels.use_numba()
    _kernels.use_numba(request.param == "numba")
    yield request.param
    _kernels.use_numba(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
