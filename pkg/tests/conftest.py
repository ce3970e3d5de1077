import numpy as np
import pytest

from confsets import _kernels
from confsets.simdata import SimConfig, generate_mixed3d

BACKENDS = ["numpy"] + (["numba"] if _kernels.numba_available() else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = _kernels.backend()
    _kernels.use(request.param)
    yield request.param
    _kernels.use(prev)


@pytest.fixture(scope="session")
def small_data():
    return generate_mixed3d(SimConfig(points_per_class=300, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
