import numpy as np
import pytest
from scipy.stats import norm

from vcotta.bnn import (
    VariationalNet,
    clone_frozen,
    forward_mean,
    forward_sample,
    gaussian_kl,
    kl_between,
    kl_gradients,
)
from vcotta.checkpoint import to_bytes
from vcotta.numcore import Rng, ShapeError, finite_diff_grad, softmax_rows

from .conftest import perturbed_net, rel_err


def single_layer(w_mu, w_sigma, b_mu, b_sigma):
    net = VariationalNet.from_means([np.array(w_mu, float)], [np.array(b_mu, float)], ["identity"])
    layer = net.layers[0]
    layer.weight.rho = np.log(np.expm1(np.broadcast_to(np.asarray(w_sigma, float), layer.weight.mu.shape)))
    layer.bias.rho = np.log(np.expm1(np.broadcast_to(np.asarray(b_sigma, float), layer.bias.mu.shape)))
    return net


def test_zero_means_give_uniform_prediction(rng):
    net = VariationalNet.random([3, 5, 4], rng)
    for layer in net.layers:
        layer.weight.mu[:] = 0.0
        layer.bias.mu[:] = 0.0
    logits = forward_mean(net, rng.normal((6, 3)))
    assert np.all(logits == 0.0)
    assert np.allclose(softmax_rows(logits), 0.25)


def test_identity_layer_passes_input_through():
    net = VariationalNet.from_means([np.eye(2)], [np.zeros(2)], ["identity"])
    assert np.array_equal(forward_mean(net, np.array([[2.0, 5.0]])), [[2.0, 5.0]])


def test_forward_shape_error(rng):
    net = VariationalNet.random([3, 4, 2], rng)
    with pytest.raises(ShapeError):
        forward_mean(net, np.ones((2, 5)))


def test_sample_collapses_to_mean_when_sigma_vanishes(rng):
    net = perturbed_net([4, 8, 8, 3], rng, rho_range=(-40.0, -40.0))
    x = rng.normal((10, 4))
    assert np.max(np.abs(forward_sample(net, x, Rng(0)) - forward_mean(net, x))) < 1e-9


def test_sample_is_deterministic_per_seed(rng):
    net = perturbed_net([4, 8, 3], rng)
    x = rng.normal((5, 4))
    assert np.array_equal(forward_sample(net, x, Rng(9)), forward_sample(net, x, Rng(9)))


def test_sample_moments_single_weight():
    # x = 1, w ~ N(0, 1), bias deviation negligible
    net = single_layer([[0.0]], 1.0, [0.0], 1e-30)
    draws = forward_sample(net, np.ones((100_000, 1)), Rng(11))[:, 0]
    assert abs(draws.mean()) < 0.02
    assert abs(draws.var() - 1.0) < 0.02


def test_pushforward_matches_weight_space_gaussian(rng):
    # affine layer: each pre-activation is N(x mu_W + mu_b, x^2 sigma_W^2 + sigma_b^2)
    net = perturbed_net([3, 2], rng, rho_range=(-1.5, 0.5))
    x = np.array([[0.7, -1.2, 2.0]])
    layer = net.layers[0]
    mean = (x @ layer.weight.mu + layer.bias.mu)[0]
    var = ((x ** 2) @ layer.weight.sigma ** 2 + layer.bias.sigma ** 2)[0]
    n = 100_000
    draws = forward_sample(net, np.repeat(x, n, axis=0), Rng(5))
    se_mean = np.sqrt(var / n)
    se_var = var * np.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 3 * se_mean)
    assert np.all(np.abs(draws.var(axis=0, ddof=1) - var) < 3 * se_var)


def test_kl_identity_and_hand_value(rng):
    net = perturbed_net([3, 4, 2], rng)
    assert kl_between(net, net) == 0.0
    q = single_layer([[1.0]], 1.0, [0.0], 1.0)
    p = single_layer([[0.0]], 1.0, [0.0], 1.0)
    assert kl_between(q, p) == pytest.approx(0.5, abs=1e-12)


def test_kl_architecture_mismatch(rng):
    with pytest.raises(ShapeError):
        kl_between(VariationalNet.random([3, 4, 2], rng), VariationalNet.random([3, 5, 2], rng))


def test_kl_matches_monte_carlo(rng):
    # 8 coordinates: 1 x 4 weights + 4 biases
    q = perturbed_net([1, 4], rng, mu_scale=1.0, rho_range=(-1.0, 1.0))
    p = perturbed_net([1, 4], rng, mu_scale=1.0, rho_range=(-1.0, 1.0))
    vq, vp = q.to_vector(), p.to_vector()
    mu_idx = np.r_[0:4, 8:12]
    rho_idx = np.r_[4:8, 12:16]
    mq, sq = vq[mu_idx], np.log1p(np.exp(vq[rho_idx]))
    mp, sp = vp[mu_idx], np.log1p(np.exp(vp[rho_idx]))
    theta = mq + sq * Rng(3).normal((1_000_000, 8))
    log_ratio = (norm.logpdf(theta, mq, sq) - norm.logpdf(theta, mp, sp)).sum(axis=1)
    assert kl_between(q, p) == pytest.approx(log_ratio.mean(), rel=1e-2)


def test_kl_nonnegative_random_pairs():
    rng = Rng(8)
    for _ in range(200):
        q = perturbed_net([2, 3, 2], rng)
        p = perturbed_net([2, 3, 2], rng)
        assert kl_between(q, p) >= 0.0


def test_kl_gradient_hand_values(rng):
    net = perturbed_net([3, 4, 2], rng)
    g = kl_gradients(net, net)
    assert all(np.all(layer["w_mu"] == 0) and np.all(layer["b_mu"] == 0) for layer in g.layers)
    q = single_layer([[1.0]], 1.0, [0.0], 1.0)
    p = single_layer([[0.0]], 1.0, [0.0], 1.0)
    assert kl_gradients(q, p).layers[0]["w_mu"][0, 0] == pytest.approx(1.0)


@pytest.mark.parametrize("dims", [[3, 4, 2], [5, 16, 16, 3], [4, 64, 64, 3]])
def test_kl_gradients_match_finite_differences(dims):
    rng = Rng(sum(dims))
    q = perturbed_net(dims, rng)
    p = perturbed_net(dims, rng)
    analytic = kl_gradients(q, p).to_vector()
    numeric = finite_diff_grad(lambda v: kl_between(q.with_vector(v), p), q.to_vector(), h=1e-5)
    assert rel_err(analytic, numeric) < 1e-4


def test_gaussian_kl_hand_value():
    assert gaussian_kl([1.0], [1.0], [0.0], [1.0]) == pytest.approx(0.5)


def test_clone_is_independent(rng):
    net = perturbed_net([3, 4, 2], rng)
    snapshot = clone_frozen(net)
    copy = clone_frozen(net)
    net.layers[0].weight.mu += 1.0
    assert kl_between(copy, snapshot) == 0.0
    assert kl_between(clone_frozen(copy), copy) == 0.0
    assert to_bytes(copy) == to_bytes(snapshot)
