"""Source-model training and variational warm-up.

The warm-up turns a deterministic classifier into a mean-field Gaussian
network: means start at the deterministic weights, deviations start small,
and a few epochs of ELBO descent on the labeled source data follow, with a
Gaussian prior centred on the deterministic weights.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .bnn import (
    DEFAULT_SIGMA_INIT,
    ForwardCache,
    VariationalNet,
    apply_sgd,
    backward,
    draw_noise,
    forward,
    forward_mean,
    kl_between,
    kl_gradients,
)
from .metrics import error_rate
from .numcore import Rng, ShapeError, argmax_rows, inverse_softplus
from .objectives import nll_supervised
from .stream import LabeledDataset

log = logging.getLogger(__name__)


@dataclass
class DeterministicNet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    class_count: int
    converged: bool = True

    def __post_init__(self):
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[0] != self.weights[i - 1].shape[1]:
                raise ShapeError(f"layer {i} does not chain")
        if self.weights[-1].shape[1] != self.class_count:
            raise ShapeError("last layer width must equal class_count")

    def as_variational(self, sigma=DEFAULT_SIGMA_INIT) -> VariationalNet:
        return VariationalNet.from_means(self.weights, self.biases, self.activations, sigma_init=sigma)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return forward_mean(self.as_variational(), x)


@dataclass
class PretrainConfig:
    epochs: int = 50
    learning_rate: float = 0.1
    batch_size: int = 64
    target_error: float = 0.0


@dataclass
class WarmupConfig:
    epochs: int = 5
    learning_rate: float = 0.05
    prior_sigma0: float = 0.1
    batch_size: int = 64
    kl_scale: float | None = None  # default 1 / n_train, the per-sample ELBO weight
    sigma_init: float = DEFAULT_SIGMA_INIT
    trust_radius: float = 0.05  # max per-coordinate move of a mean per step
    data_fraction: float = 1.0
    max_accuracy_drop: float = 0.02

    def __post_init__(self):
        for name in ("learning_rate", "prior_sigma0", "sigma_init", "trust_radius"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ValueError("data_fraction must lie in (0, 1]")
        if self.epochs > 10:
            warnings.warn("more than 10 warm-up epochs tends to hurt adaptation", stacklevel=2)


def _minibatches(n: int, batch_size: int, rng: Rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def pretrain_source(dims, data: LabeledDataset, cfg: PretrainConfig | None, rng: Rng) -> DeterministicNet:
    """Plain SGD on the supervised NLL of a deterministic ReLU MLP."""
    cfg = cfg or PretrainConfig()
    if dims[0] != data.dim or dims[-1] != data.class_count:
        raise ShapeError(f"architecture {dims} does not fit data ({data.dim} -> {data.class_count})")
    net = VariationalNet.random(dims, rng)

    def snapshot():
        return [l.weight.mu.copy() for l in net.layers], [l.bias.mu.copy() for l in net.layers]

    best = snapshot()
    best_err = error_rate(argmax_rows(forward_mean(net, data.features)), data.labels)
    for _ in range(cfg.epochs):
        if best_err <= cfg.target_error:
            break
        for idx in _minibatches(len(data), cfg.batch_size, rng):
            cache = ForwardCache()
            logits = forward(net, data.features[idx], None, cache)
            _, d = nll_supervised(logits, data.labels[idx], with_grad=True)
            apply_sgd(net, backward(net, cache, d), cfg.learning_rate)
        err = error_rate(argmax_rows(forward_mean(net, data.features)), data.labels)
        if err < best_err:
            best_err, best = err, snapshot()
    # target_error 0 means "train for the full budget", not a convergence test
    converged = cfg.target_error == 0.0 or best_err <= cfg.target_error
    acts = [l.activation for l in net.layers]
    det = DeterministicNet(best[0], best[1], acts, data.class_count, converged)
    if not converged:
        warnings.warn(f"source training stopped at error {best_err:.3f} above target", stacklevel=2)
    return det


def _gaussian_prior(means: VariationalNet, sigma0: float) -> VariationalNet:
    prior = means.with_vector(means.to_vector())
    rho0 = float(inverse_softplus(sigma0))
    for layer in prior.layers:
        layer.weight.rho = np.full_like(layer.weight.rho, rho0)
        layer.bias.rho = np.full_like(layer.bias.rho, rho0)
    return prior


def elbo_objective(net, prior, data: LabeledDataset, kl_scale: float, noise=None) -> float:
    """NLL of one stochastic forward (or mean forward) plus kl_scale * KL(net || prior)."""
    logits = forward(net, data.features, noise)
    return nll_supervised(logits, data.labels) + kl_scale * kl_between(net, prior)


def train_elbo(net: VariationalNet, prior: VariationalNet, data: LabeledDataset, epochs: int,
               lr: float, batch_size: int, kl_scale: float, rng: Rng,
               trust_radius: float | None = None, report: dict | None = None) -> VariationalNet:
    """Minibatch SGD on the negative ELBO, mutating ``net`` in place."""
    eval_noise = draw_noise(net, len(data), rng.spawn(7))
    history = [elbo_objective(net, prior, data, kl_scale, eval_noise)]
    max_step = 0.0
    for _ in range(epochs):
        for idx in _minibatches(len(data), batch_size, rng):
            cache = ForwardCache()
            xb = data.features[idx]
            logits = forward(net, xb, draw_noise(net, len(idx), rng), cache)
            _, d = nll_supervised(logits, data.labels[idx], with_grad=True)
            grads = backward(net, cache, d) + kl_gradients(net, prior).scaled(kl_scale)
            before = net.to_vector()
            apply_sgd(net, grads, lr, mu_clip=trust_radius)
            max_step = max(max_step, float(np.abs(net.to_vector() - before)[_mu_mask(net)].max()))
        history.append(elbo_objective(net, prior, data, kl_scale, eval_noise))
    if report is not None:
        report["objective"] = history
        report["max_mu_step"] = max_step
    return net


def _mu_mask(net: VariationalNet) -> np.ndarray:
    parts = []
    for layer in net.layers:
        for key in ("w_mu", "w_rho", "b_mu", "b_rho"):
            parts.append(np.full(layer.get(key).size, key.endswith("mu")))
    return np.concatenate(parts)


def variational_warmup(det: DeterministicNet, source_data: LabeledDataset, cfg: WarmupConfig | None,
                       rng: Rng, report: dict | None = None) -> VariationalNet:
    cfg = cfg or WarmupConfig()
    report = {} if report is None else report
    if det.weights[0].shape[0] != source_data.dim:
        raise ShapeError("deterministic net does not fit the source features")
    data = source_data
    if cfg.data_fraction < 1.0:
        n = max(1, int(round(cfg.data_fraction * len(source_data))))
        data = source_data.subset(rng.permutation(len(source_data))[:n])
    q = det.as_variational(cfg.sigma_init)
    prior = _gaussian_prior(q, cfg.prior_sigma0)
    kl_scale = cfg.kl_scale if cfg.kl_scale is not None else 1.0 / len(data)
    train_elbo(q, prior, data, cfg.epochs, cfg.learning_rate, cfg.batch_size, kl_scale, rng,
               trust_radius=cfg.trust_radius, report=report)

    det_acc = 1.0 - error_rate(argmax_rows(det.logits(source_data.features)), source_data.labels)
    q_acc = 1.0 - error_rate(argmax_rows(forward_mean(q, source_data.features)), source_data.labels)
    report.update(det_accuracy=det_acc, accuracy=q_acc, kl_to_prior=kl_between(q, prior))
    report["degraded"] = q_acc < det_acc - cfg.max_accuracy_drop
    if report["degraded"]:
        warnings.warn(
            f"warm-up lowered source accuracy from {det_acc:.3f} to {q_acc:.3f}", stacklevel=2
        )
    log.info("warm-up: accuracy %.4f (deterministic %.4f)", q_acc, det_acc)
    return q


def train_bnn_direct(dims, data: LabeledDataset, epochs: int, rng: Rng, lr: float = 0.1,
                     batch_size: int = 64, prior_sigma0: float = 1.0,
                     sigma_init: float = DEFAULT_SIGMA_INIT) -> VariationalNet:
    """Bayes-by-backprop from a random start under a zero-mean Gaussian prior."""
    net = VariationalNet.random(dims, rng, sigma_init=sigma_init)
    prior = _gaussian_prior(net, prior_sigma0)
    for layer in prior.layers:
        layer.weight.mu = np.zeros_like(layer.weight.mu)
        layer.bias.mu = np.zeros_like(layer.bias.mu)
    return train_elbo(net, prior, data, epochs, lr, batch_size, 1.0 / len(data), rng)
