import numpy as np
import pytest

from pimlp import kernels
from pimlp.data import HyperConfig
from pimlp.numerics import Rng

SMALL = HyperConfig(input_len=64, patch_len=16, stride=8, channels=2, hidden_dim=8)


@pytest.fixture(params=[b.name for b in kernels.available_backends()])
def kernel_backend(request, monkeypatch):
    """Run a test once per available kernel backend."""
    backend = {b.name: b for b in kernels.available_backends()}[request.param]
    return backend


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)
