"""KL divergences between categorical mixtures and between Gaussian nets and
Gaussian-mixture priors. These back the checks on the mixture-prior bound."""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .bnn import VariationalNet, kl_between
from .numcore import Rng


def categorical_kl(p, q) -> float:
    """Exact KL(p || q) for probability vectors; 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def mixture(weights, components) -> np.ndarray:
    """sum_i w_i p_i for a weight vector and a (k, C) array of categorical components."""
    return np.asarray(weights, dtype=np.float64) @ np.asarray(components, dtype=np.float64)


def mixture_kl_bound(w, comps, w2, comps2) -> tuple[float, float]:
    """(KL(mixture || mixture'), KL(w || w') + sum_i w_i KL(p_i || p'_i))."""
    lhs = categorical_kl(mixture(w, comps), mixture(w2, comps2))
    rhs = categorical_kl(w, w2) + sum(wi * categorical_kl(p, p2) for wi, p, p2 in zip(w, comps, comps2) if wi > 0)
    return lhs, rhs


def _flat_gaussian(net: VariationalNet):
    mus, sigmas = [], []
    for layer in net.layers:
        for part in (layer.weight, layer.bias):
            mus.append(part.mu.ravel())
            sigmas.append(part.sigma.ravel())
    return np.concatenate(mus), np.concatenate(sigmas)


def _log_density(theta, mu, sigma):
    z = (theta - mu) / sigma
    return -0.5 * np.sum(z * z, axis=1) - np.sum(np.log(sigma)) - 0.5 * mu.size * np.log(2 * np.pi)


def kl_to_prior_mixture_mc(q: VariationalNet, source: VariationalNet, teacher: VariationalNet,
                           alpha: float, n_samples: int, rng: Rng) -> tuple[float, float]:
    """Monte-Carlo estimate of KL(q || alpha*source + (1-alpha)*teacher) over
    all parameters, returned with its standard error."""
    mq, sq = _flat_gaussian(q)
    m0, s0 = _flat_gaussian(source)
    m1, s1 = _flat_gaussian(teacher)
    theta = mq + sq * rng.normal((n_samples, mq.size))
    log_q = _log_density(theta, mq, sq)
    log_mix = logsumexp(
        np.stack([np.log(alpha) + _log_density(theta, m0, s0), np.log1p(-alpha) + _log_density(theta, m1, s1)]),
        axis=0,
    )
    diff = log_q - log_mix
    return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n_samples))


def mixture_kl_surrogate(q: VariationalNet, source: VariationalNet, teacher: VariationalNet, alpha: float) -> float:
    """alpha KL(q||source) + (1-alpha) KL(q||teacher), the bound the student minimizes."""
    return alpha * kl_between(q, source) + (1.0 - alpha) * kl_between(q, teacher)
