"""Dense float64 numerics shared by every other module.

Tensors are plain 2-D ``numpy.ndarray`` objects of dtype float64, row-major.
Randomness comes from :class:`Rng`, a thin wrapper around numpy's PCG64 bit
generator so that a seed fully determines every draw on any platform.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

RNG_ALGORITHM = "PCG64"


class ShapeError(ValueError):
    """Raised when array shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an input lies outside an operation's domain."""


class OracleError(RuntimeError):
    """Raised when a finite-difference probe evaluates to a non-finite value."""


class Rng:
    """Seeded random stream (PCG64). Normals use numpy's deterministic transform."""

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, size=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream, derived deterministically from this seed."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))


def as_tensor(values) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D tensor, got {a.ndim} dims")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul takes 2-D tensors")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def entropy_rows(probs: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Shannon entropy of each row, with 0 log 0 taken as 0."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > tol):
        raise DomainError("rows must be probability vectors")
    logp = np.log(np.where(probs > 0, probs, 1.0))
    return -(probs * logp).sum(axis=1)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    # log(expm1(y)) loses precision for large y
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def argmax_rows(probs: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. lowest-index tie-break
    return np.argmax(probs, axis=1)


def finite_diff_grad(f: Callable[[np.ndarray], float], at, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``at``."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.array(at, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + h
        fp = f(x.copy())
        x[i] = old - h
        fm = f(x.copy())
        x[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b) -> float:
    """Norm-wise relative difference, robust to both vectors being zero."""
    a = np.ravel(a)
    b = np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
