import numpy as np
import pytest

from vcotta.bnn import PARAM_KEYS, VariationalNet
from vcotta.numcore import Rng


def perturbed_net(dims, rng: Rng, mu_scale=0.3, rho_range=(-3.0, 0.0)) -> VariationalNet:
    """Random net with non-trivial deviations on every coordinate."""
    net = VariationalNet.random(dims, rng)
    for layer in net.layers:
        for key in PARAM_KEYS:
            shape = layer.get(key).shape
            if key.endswith("mu"):
                layer.set(key, layer.get(key) + mu_scale * rng.normal(shape))
            else:
                layer.set(key, rng.uniform(shape, *rho_range))
    return net


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


@pytest.fixture
def rng():
    return Rng(1234)
