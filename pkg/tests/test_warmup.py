import warnings

import numpy as np
import pytest

from vcotta.bnn import forward_mean, kl_between
from vcotta.metrics import error_rate
from vcotta.numcore import Rng, ShapeError, argmax_rows
from vcotta.stream import make_blobs
from vcotta.warmup import (
    PretrainConfig,
    WarmupConfig,
    _gaussian_prior,
    pretrain_source,
    train_bnn_direct,
    train_elbo,
    variational_warmup,
)


@pytest.fixture(scope="module")
def blobs():
    return make_blobs(4, 6, 60, 0.8, Rng(21))


@pytest.fixture(scope="module")
def det(blobs):
    return pretrain_source([6, 16, 4], blobs, PretrainConfig(epochs=30), Rng(22))


def test_pretrain_separable_two_class():
    data = make_blobs(2, 4, 100, 0.3, Rng(0))
    net = pretrain_source([4, 8, 2], data, PretrainConfig(epochs=50), Rng(1))
    assert error_rate(argmax_rows(net.logits(data.features)), data.labels) < 0.05


def test_pretrain_zero_epochs_is_the_init(blobs):
    from vcotta.bnn import VariationalNet

    net = pretrain_source([6, 16, 4], blobs, PretrainConfig(epochs=0), Rng(5))
    init = VariationalNet.random([6, 16, 4], Rng(5))
    for w, layer in zip(net.weights, init.layers):
        assert np.array_equal(w, layer.weight.mu)


def test_pretrain_is_deterministic(blobs):
    a = pretrain_source([6, 8, 4], blobs, PretrainConfig(epochs=3), Rng(9))
    b = pretrain_source([6, 8, 4], blobs, PretrainConfig(epochs=3), Rng(9))
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))


def test_pretrain_flags_unmet_target(blobs):
    with pytest.warns(UserWarning):
        net = pretrain_source([6, 4], blobs, PretrainConfig(epochs=1, target_error=1e-9), Rng(0))
    assert not net.converged


def test_pretrain_shape_check(blobs):
    with pytest.raises(ShapeError):
        pretrain_source([5, 4], blobs, None, Rng(0))


def test_zero_epoch_warmup_is_exact(det, blobs):
    q = variational_warmup(det, blobs, WarmupConfig(epochs=0, sigma_init=2e-3), Rng(0))
    for w, b, layer in zip(det.weights, det.biases, q.layers):
        assert np.array_equal(layer.weight.mu, w)
        assert np.array_equal(layer.bias.mu.ravel(), np.ravel(b))
        np.testing.assert_allclose(layer.weight.sigma, 2e-3, rtol=1e-12)
    assert np.array_equal(forward_mean(q, blobs.features), det.logits(blobs.features))


def test_default_warmup_keeps_accuracy(det, blobs):
    report = {}
    q = variational_warmup(det, blobs, WarmupConfig(), Rng(1), report)
    assert report["accuracy"] >= report["det_accuracy"] - 0.02
    assert not report["degraded"]
    prior = _gaussian_prior(det.as_variational(), 0.1)
    kl = kl_between(q, prior)
    assert np.isfinite(kl) and kl > 0


def test_trust_radius_bounds_every_mean_step(det, blobs):
    report = {}
    variational_warmup(det, blobs, WarmupConfig(epochs=2, learning_rate=5.0, trust_radius=1e-3), Rng(2), report)
    assert 0 < report["max_mu_step"] <= 1e-3 + 1e-15


def test_elbo_mostly_decreases(det, blobs):
    q = det.as_variational()
    prior = _gaussian_prior(q, 0.1)
    report = {}
    train_elbo(q, prior, blobs, 20, 0.02, 64, 1.0 / len(blobs), Rng(3), trust_radius=0.05, report=report)
    hist = np.array(report["objective"])
    assert np.mean(np.diff(hist) <= 0) >= 0.9


def test_long_warmup_warns():
    with pytest.warns(UserWarning):
        WarmupConfig(epochs=20)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        WarmupConfig(epochs=5)


@pytest.mark.parametrize("bad", [{"learning_rate": 0}, {"data_fraction": 0}, {"epochs": -1}])
def test_warmup_config_validation(bad):
    with pytest.raises(ValueError):
        WarmupConfig(**bad)


def test_direct_bnn_learns(blobs):
    net = train_bnn_direct([6, 16, 4], blobs, 30, Rng(4))
    assert error_rate(argmax_rows(forward_mean(net, blobs.features)), blobs.labels) < 0.1


def test_partial_data_warmup(det, blobs):
    report = {}
    variational_warmup(det, blobs, WarmupConfig(epochs=1, data_fraction=0.25), Rng(5), report)
    assert len(report["objective"]) == 2
