import numpy as np
import pytest

from pignight import kernels
from pignight.datamodel import generate_synthetic_dataset


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """A small synthetic day/night set shared by the slower tests."""
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic_dataset(root, seed=11, n_samples=8, size=64, num_classes=8, n_prompt=4)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=kernels.available_backends())
def kernel_backend(request):
    previous = kernels.BACKEND
    kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(previous)


def random_simplex(rng, num_classes, h, w):
    p = rng.random((num_classes, h, w)) + 1e-3
    return p / p.sum(axis=0, keepdims=True)


@pytest.hookimpl(hookwrapper=True, tryfirst=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, f"rep_{rep.when}", rep)
