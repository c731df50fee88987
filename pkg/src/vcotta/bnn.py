"""Mean-field Gaussian MLPs.

Every weight and bias coordinate carries an independent Gaussian
``N(mu, softplus(rho)^2)``. Stochastic forwards use the local
reparameterization trick: each affine pre-activation is drawn directly from
its Gaussian pushforward instead of sampling weight matrices.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .numcore import Rng, ShapeError, inverse_softplus, sigmoid, softplus

ACTIVATIONS = ("relu", "identity")
PARAM_KEYS = ("w_mu", "w_rho", "b_mu", "b_rho")

DEFAULT_SIGMA_INIT = 1e-3


@dataclass
class GaussianParams:
    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        if self.mu.shape != self.rho.shape:
            raise ShapeError(f"mu {self.mu.shape} and rho {self.rho.shape} differ")

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)

    @property
    def shape(self):
        return self.mu.shape


@dataclass
class VariationalLayer:
    weight: GaussianParams  # in_dim x out_dim
    bias: GaussianParams  # 1 x out_dim
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (1, self.weight.shape[1]):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def get(self, key: str) -> np.ndarray:
        part = self.weight if key[0] == "w" else self.bias
        return part.mu if key.endswith("mu") else part.rho

    def set(self, key: str, value: np.ndarray) -> None:
        part = self.weight if key[0] == "w" else self.bias
        if key.endswith("mu"):
            part.mu = value
        else:
            part.rho = value


@dataclass
class VariationalNet:
    layers: list[VariationalLayer]
    class_count: int = field(default=0)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        for i in range(1, len(self.layers)):
            if self.layers[i].in_dim != self.layers[i - 1].out_dim:
                raise ShapeError(f"layer {i} input does not chain with layer {i - 1}")
        if self.class_count == 0:
            self.class_count = self.layers[-1].out_dim
        if self.layers[-1].out_dim != self.class_count:
            raise ShapeError("last layer width must equal class_count")
        if self.layers[-1].activation != "identity":
            raise ShapeError("last layer must emit logits (identity activation)")

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def architecture(self) -> list[tuple[int, int, str]]:
        return [(l.in_dim, l.out_dim, l.activation) for l in self.layers]

    @classmethod
    def from_means(cls, weights, biases, activations=None, sigma_init=DEFAULT_SIGMA_INIT):
        """Wrap point-estimate weights as Gaussians with a small common deviation."""
        n = len(weights)
        if activations is None:
            activations = ["relu"] * (n - 1) + ["identity"]
        rho0 = float(inverse_softplus(sigma_init))
        layers = []
        for w, b, act in zip(weights, biases, activations):
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64).reshape(1, -1)
            layers.append(
                VariationalLayer(
                    GaussianParams(w, np.full_like(w, rho0)),
                    GaussianParams(b, np.full_like(b, rho0)),
                    act,
                )
            )
        return cls(layers)

    @classmethod
    def random(cls, dims, rng: Rng, sigma_init=DEFAULT_SIGMA_INIT):
        """He-initialised means; ReLU on hidden layers, identity on the output."""
        weights, biases = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            weights.append(rng.normal((a, b)) * np.sqrt(2.0 / a))
            biases.append(np.zeros((1, b)))
        return cls.from_means(weights, biases, sigma_init=sigma_init)

    def check_compatible(self, other: "VariationalNet") -> None:
        if len(self.layers) != len(other.layers):
            raise ShapeError(
                f"layer count differs: {len(self.layers)} vs {len(other.layers)}"
            )
        for i, (a, b) in enumerate(zip(self.layers, other.layers)):
            if a.weight.shape != b.weight.shape or a.activation != b.activation:
                raise ShapeError(
                    f"layer {i} differs: {a.weight.shape}/{a.activation} vs "
                    f"{b.weight.shape}/{b.activation}"
                )

    # flat views, used by the finite-difference checks and by SGD
    def param_arrays(self):
        for layer in self.layers:
            for key in PARAM_KEYS:
                yield layer.get(key)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.param_arrays()])

    def with_vector(self, vec: np.ndarray) -> "VariationalNet":
        out = clone_frozen(self)
        pos = 0
        for layer in out.layers:
            for key in PARAM_KEYS:
                old = layer.get(key)
                layer.set(key, np.array(vec[pos : pos + old.size]).reshape(old.shape))
                pos += old.size
        return out

    def num_params(self) -> int:
        return sum(a.size for a in self.param_arrays())


class GradientSet:
    """Per-layer gradients for (w_mu, w_rho, b_mu, b_rho), mirroring a net."""

    def __init__(self, layers: list[dict[str, np.ndarray]]):
        self.layers = layers

    @classmethod
    def zeros_like(cls, net: VariationalNet) -> "GradientSet":
        return cls([{k: np.zeros_like(l.get(k)) for k in PARAM_KEYS} for l in net.layers])

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(
            [{k: a[k] + b[k] for k in PARAM_KEYS} for a, b in zip(self.layers, other.layers)]
        )

    def scaled(self, c: float) -> "GradientSet":
        return GradientSet([{k: c * g[k] for k in PARAM_KEYS} for g in self.layers])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([g[k].ravel() for g in self.layers for k in PARAM_KEYS])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g[k])) for g in self.layers for k in PARAM_KEYS)

    def norm(self) -> float:
        return float(np.linalg.norm(self.to_vector()))


def apply_sgd(net: VariationalNet, grads: GradientSet, lr: float, mu_clip: float | None = None):
    """In-place SGD step. ``mu_clip`` caps the per-coordinate move of every mean."""
    for layer, g in zip(net.layers, grads.layers):
        for key in PARAM_KEYS:
            step = lr * g[key]
            if mu_clip is not None and key.endswith("mu"):
                step = np.clip(step, -mu_clip, mu_clip)
            layer.set(key, layer.get(key) - step)


def clone_frozen(net: VariationalNet) -> VariationalNet:
    return copy.deepcopy(net)


# ---------------------------------------------------------------- forwards


class ForwardCache:
    def __init__(self):
        self.inputs = []  # layer inputs
        self.pre = []  # pre-activations
        self.noise = []  # eps per layer, None for mean forwards
        self.std = []  # sqrt of pre-activation variance


def _check_input(net: VariationalNet, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != net.layers[0].in_dim:
        raise ShapeError(
            f"input of shape {x.shape} does not fit first layer in_dim {net.layers[0].in_dim}"
        )


def draw_noise(net: VariationalNet, batch: int, rng: Rng) -> list[np.ndarray]:
    return [rng.normal((batch, layer.out_dim)) for layer in net.layers]


def forward(net: VariationalNet, x: np.ndarray, noise=None, cache: ForwardCache | None = None):
    """Logits for ``x``. With ``noise`` (one eps array per layer) each
    pre-activation is ``x mu_W + mu_b + sqrt(x^2 sigma_W^2 + sigma_b^2) * eps``;
    without it, only the means are used."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(net, x)
    h = x
    for i, layer in enumerate(net.layers):
        mean = h @ layer.weight.mu + layer.bias.mu
        if noise is not None:
            var = (h * h) @ (layer.weight.sigma ** 2) + layer.bias.sigma ** 2
            std = np.sqrt(var)
            z = mean + std * noise[i]
        else:
            std = None
            z = mean
        if cache is not None:
            cache.inputs.append(h)
            cache.pre.append(z)
            cache.noise.append(None if noise is None else noise[i])
            cache.std.append(std)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return h


def forward_mean(net: VariationalNet, x: np.ndarray) -> np.ndarray:
    return forward(net, x)


def forward_sample(net: VariationalNet, x: np.ndarray, rng: Rng) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_input(net, x)
    return forward(net, x, draw_noise(net, x.shape[0], rng))


def backward(net: VariationalNet, cache: ForwardCache, dlogits: np.ndarray) -> GradientSet:
    """Gradients of a scalar loss w.r.t. (mu, rho) given dloss/dlogits, with the
    noise recorded in ``cache`` held fixed."""
    grads = []
    dz = None
    dh = dlogits
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        h_in = cache.inputs[i]
        z = cache.pre[i]
        dz = dh * (z > 0) if layer.activation == "relu" else dh
        g = {
            "w_mu": h_in.T @ dz,
            "b_mu": dz.sum(axis=0, keepdims=True),
        }
        eps = cache.noise[i]
        if eps is not None:
            sw = layer.weight.sigma
            sb = layer.bias.sigma
            dvar = dz * eps / (2.0 * cache.std[i])
            dsw = 2.0 * sw * ((h_in * h_in).T @ dvar)
            dsb = 2.0 * sb * dvar.sum(axis=0, keepdims=True)
            g["w_rho"] = dsw * sigmoid(layer.weight.rho)
            g["b_rho"] = dsb * sigmoid(layer.bias.rho)
            dh = dz @ layer.weight.mu.T + 2.0 * h_in * (dvar @ (sw ** 2).T)
        else:
            g["w_rho"] = np.zeros_like(layer.weight.rho)
            g["b_rho"] = np.zeros_like(layer.bias.rho)
            dh = dz @ layer.weight.mu.T
        grads.append(g)
    grads.reverse()
    return GradientSet(grads)


# ---------------------------------------------------------------- KL


def _kl_terms(mq, sq, mp, sp):
    return np.log(sp / sq) + (sq ** 2 + (mq - mp) ** 2) / (2.0 * sp ** 2) - 0.5


def gaussian_kl(mu_q, sigma_q, mu_p, sigma_p) -> float:
    """KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)) summed over coordinates."""
    return float(np.sum(_kl_terms(*(np.asarray(a, dtype=np.float64) for a in (mu_q, sigma_q, mu_p, sigma_p)))))


def kl_between(q: VariationalNet, p: VariationalNet) -> float:
    q.check_compatible(p)
    total = 0.0
    for lq, lp in zip(q.layers, p.layers):
        for gq, gp in ((lq.weight, lp.weight), (lq.bias, lp.bias)):
            total += float(np.sum(_kl_terms(gq.mu, gq.sigma, gp.mu, gp.sigma)))
    return total


def kl_gradients(q: VariationalNet, p: VariationalNet) -> GradientSet:
    """d KL(q||p) / d(mu_q, rho_q), with p held constant."""
    q.check_compatible(p)
    out = []
    for lq, lp in zip(q.layers, p.layers):
        g = {}
        for prefix, gq, gp in (("w", lq.weight, lp.weight), ("b", lq.bias, lp.bias)):
            sq, sp = gq.sigma, gp.sigma
            g[prefix + "_mu"] = (gq.mu - gp.mu) / sp ** 2
            g[prefix + "_rho"] = (sq / sp ** 2 - 1.0 / sq) * sigmoid(gq.rho)
        out.append(g)
    return GradientSet(out)
