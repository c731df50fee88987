"""Synthetic source tasks, feature-space corruptions, domain schedules and CSV I/O.

The corruption operators are vector analogs of the usual image-corruption
families. Each maps a severity level 1..5 to an internal magnitude through
:data:`SEVERITY_LAW`; a magnitude of 0 is the identity for every kind.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct, idct

from .numcore import DomainError, Rng

CORRUPTIONS = (
    "gauss_noise",
    "shot_noise",
    "impulse",
    "smooth_defocus",
    "smooth_glass",
    "directional_blur",
    "zoom_scale",
    "additive_snow",
    "frost_mask",
    "fog_wash",
    "brightness_shift",
    "contrast_scale",
    "elastic_warp",
    "quantize_pixelate",
    "lossy_jpeg_analog",
)

# magnitude at each severity 1..5
SEVERITY_LAW = {
    "gauss_noise": (0.16, 0.32, 0.48, 0.64, 0.8),  # noise std, 0.16 * s
    "shot_noise": (0.2, 0.35, 0.5, 0.65, 0.8),  # std per sqrt(|x|)
    "impulse": (0.03, 0.06, 0.09, 0.13, 0.17),  # fraction of coordinates hit
    "smooth_defocus": (0.2, 0.35, 0.5, 0.65, 0.8),  # blend with 3-tap box blur
    "smooth_glass": (0.1, 0.2, 0.3, 0.4, 0.5),  # neighbour swap probability
    "directional_blur": (0.15, 0.3, 0.45, 0.6, 0.75),  # causal smear weight
    "zoom_scale": (0.2, 0.4, 0.6, 0.8, 1.0),  # index displacement at the outermost coordinate
    "additive_snow": (0.04, 0.08, 0.12, 0.16, 0.2),  # flake probability
    "frost_mask": (0.1, 0.2, 0.3, 0.4, 0.5),  # blend toward frost pattern
    "fog_wash": (0.3, 0.5, 0.7, 0.9, 1.1),  # low-frequency field amplitude
    "brightness_shift": (0.3, 0.6, 0.9, 1.2, 1.5),  # additive offset
    "contrast_scale": (0.15, 0.3, 0.45, 0.6, 0.75),  # 1 - multiplier on centred features
    "elastic_warp": (0.3, 0.6, 0.9, 1.2, 1.5),  # displacement amplitude, in coordinates
    "quantize_pixelate": (32, 16, 8, 4, 2),  # number of levels, 2^(6-s)
    "lossy_jpeg_analog": (0.2, 0.4, 0.6, 0.8, 1.0),  # DCT coefficient step
}

QUANT_RANGE = 4.0


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    min_separation: float | None = None  # smallest distance between class means, if known

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("dataset needs at least one row of features")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("one label per row required")
        if np.any(self.labels < 0) or np.any(self.labels >= self.class_count):
            raise DomainError("labels must lie in [0, class_count)")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_count, self.min_separation)


@dataclass(frozen=True)
class CorruptionOp:
    kind: str
    severity: int = 5
    magnitude: float | None = None  # overrides the severity law when given

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise DomainError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise DomainError(f"severity {self.severity} outside 1..5")

    @property
    def level(self) -> float:
        if self.magnitude is not None:
            return self.magnitude
        return SEVERITY_LAW[self.kind][self.severity - 1]


@dataclass
class Segment:
    op: CorruptionOp
    batches: list[np.ndarray]
    hidden_labels: list[np.ndarray]


@dataclass
class DomainStream:
    segments: list[Segment] = field(default_factory=list)
    batch_size: int = 200

    def __len__(self):
        return sum(len(s.batches) for s in self.segments)

    def unlabeled(self):
        """What the adaptation engine sees: feature batches and nothing else."""
        for seg in self.segments:
            yield from seg.batches

    def labeled(self):
        """(segment index, op, batch, labels) for scoring."""
        for i, seg in enumerate(self.segments):
            for xb, yb in zip(seg.batches, seg.hidden_labels):
                yield i, seg.op, xb, yb


# ---------------------------------------------------------------- datasets


def class_means(classes: int, dim: int, radius: float = 3.0) -> np.ndarray:
    """Class centres: scaled simplex vertices when dim allows, else a ring in
    the first two coordinates."""
    means = np.zeros((classes, dim))
    if dim >= classes:
        means[np.arange(classes), np.arange(classes)] = radius
        means -= means.mean(axis=0, keepdims=True)
    elif dim >= 2:
        ang = 2.0 * np.pi * np.arange(classes) / classes
        means[:, 0] = radius * np.cos(ang)
        means[:, 1] = radius * np.sin(ang)
    else:
        means[:, 0] = radius * (np.arange(classes) - (classes - 1) / 2.0)
    return means


def make_blobs(classes: int, dim: int, n_per_class: int, spread: float, rng: Rng,
               radius: float = 3.0) -> LabeledDataset:
    if min(classes, dim, n_per_class) < 1:
        raise ValueError("counts must be positive")
    means = class_means(classes, dim, radius)
    labels = np.repeat(np.arange(classes), n_per_class)
    x = means[labels] + spread * rng.normal((labels.size, dim))
    order = rng.permutation(labels.size)
    if classes > 1:
        d = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=-1)
        sep = float(d[~np.eye(classes, dtype=bool)].min())
    else:
        sep = None
    return LabeledDataset(x[order], labels[order], classes, sep)


# ---------------------------------------------------------------- corruptions


def _interp_rows(x, positions):
    """Linear interpolation of each row at fractional, clamped index positions."""
    d = x.shape[1]
    pos = np.clip(positions, 0.0, d - 1.0)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, d - 1)
    w = pos - lo
    if pos.ndim == 1:
        return x[:, lo] * (1.0 - w) + x[:, hi] * w
    rows = np.arange(x.shape[0])[:, None]
    return x[rows, lo] * (1.0 - w) + x[rows, hi] * w


def _blur3(x):
    return (np.roll(x, 1, axis=1) + x + np.roll(x, -1, axis=1)) / 3.0


def _pattern(dim: int, key: int) -> np.ndarray:
    # fixed per kind and dimension, independent of the run seed
    return Rng(1_000_003 * key + dim).normal(dim)


def apply_corruption(x: np.ndarray, op: CorruptionOp, rng: Rng) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = float(op.level)
    if m == 0.0:
        return x.copy()
    n, d = x.shape
    k = op.kind
    if k == "gauss_noise":
        return x + m * rng.normal((n, d))
    if k == "shot_noise":
        return x + m * np.sqrt(np.abs(x) + 0.25) * rng.normal((n, d))
    if k == "impulse":
        hit = rng.random((n, d)) < m
        salt = np.where(rng.random((n, d)) < 0.5, -1.0, 1.0) * QUANT_RANGE * 0.75
        return np.where(hit, salt, x)
    if k == "smooth_defocus":
        return (1.0 - m) * x + m * _blur3(_blur3(x))
    if k == "smooth_glass":
        out = x.copy()
        for j in range(d - 1):
            swap = rng.random(n) < m
            a = out[swap, j].copy()
            out[swap, j] = out[swap, j + 1]
            out[swap, j + 1] = a
        return out
    if k == "directional_blur":
        out = x.copy()
        for j in range(1, d):
            out[:, j] = (1.0 - m) * x[:, j] + m * out[:, j - 1]
        return out
    if k == "zoom_scale":
        # magnify about the centre; displacement grows linearly to m at the edges
        centre = (d - 1) / 2.0
        offset = np.arange(d) - centre
        return _interp_rows(x, centre + offset * (1.0 - m / max(centre, 1.0)))
    if k == "additive_snow":
        flakes = (rng.random((n, d)) < m) * (1.0 + 0.5 * rng.random((n, d)))
        return x + 1.5 * flakes
    if k == "frost_mask":
        return (1.0 - m) * x + m * _pattern(d, 9)
    if k == "fog_wash":
        t = np.arange(d) / max(d, 1)
        phase = rng.uniform(size=(n, 1), high=2.0 * np.pi)
        field = np.cos(2.0 * np.pi * t[None, :] + phase) + 0.5
        return x + m * field
    if k == "brightness_shift":
        return x + m
    if k == "contrast_scale":
        mean = x.mean(axis=1, keepdims=True)
        return mean + (x - mean) * (1.0 - m)
    if k == "elastic_warp":
        t = np.arange(d)
        phase = rng.uniform(size=(n, 1), high=2.0 * np.pi)
        disp = m * np.sin(2.0 * np.pi * t[None, :] / max(d, 2) * 2.0 + phase)
        return _interp_rows(x, t[None, :] + disp)
    if k == "quantize_pixelate":
        levels = int(m)
        step = 2.0 * QUANT_RANGE / (levels - 1)
        clipped = np.clip(x, -QUANT_RANGE, QUANT_RANGE)
        return np.clip(np.round((clipped + QUANT_RANGE) / step) * step - QUANT_RANGE,
                       -QUANT_RANGE, QUANT_RANGE)
    if k == "lossy_jpeg_analog":
        c = dct(x, norm="ortho", axis=1)
        # coarser steps for higher frequencies, as in a JPEG table
        steps = m * (1.0 + np.arange(d) / max(d - 1, 1))
        return idct(np.round(c / steps) * steps, norm="ortho", axis=1)
    raise DomainError(f"unknown corruption kind {k!r}")


# ---------------------------------------------------------------- schedules


@dataclass
class ScheduleParams:
    batch_size: int = 200
    loops: int = 10
    kinds: tuple[str, ...] = CORRUPTIONS
    severity: int = 5
    samples_per_segment: int | None = None  # default: the whole base test set


def _segment(base: LabeledDataset, op: CorruptionOp, params: ScheduleParams, rng: Rng) -> Segment:
    n = len(base) if params.samples_per_segment is None else min(params.samples_per_segment, len(base))
    order = rng.permutation(len(base))[:n]
    x = apply_corruption(base.features[order], op, rng)
    y = base.labels[order]
    bs = params.batch_size
    batches = [x[i : i + bs] for i in range(0, n, bs)]
    labels = [y[i : i + bs] for i in range(0, n, bs)]
    return Segment(op, batches, labels)


def schedule_ops(kind: str, params: ScheduleParams, rng: Rng) -> list[CorruptionOp]:
    kinds = list(params.kinds)
    if kind == "standard":
        return [CorruptionOp(k, params.severity) for k in kinds]
    if kind == "gradual":
        ramp = (1, 2, 3, 4, 5, 4, 3, 2, 1)
        return [CorruptionOp(k, s) for k in kinds for s in ramp]
    if kind == "loops":
        return [CorruptionOp(k, params.severity) for _ in range(params.loops) for k in kinds]
    if kind == "random_order":
        perm = rng.permutation(len(kinds))
        return [CorruptionOp(kinds[i], params.severity) for i in perm]
    raise DomainError(f"unknown schedule kind {kind!r}")


def build_schedule(kind: str, base_test: LabeledDataset, params: ScheduleParams | None = None,
                   rng: Rng | None = None) -> DomainStream:
    params = params or ScheduleParams()
    rng = rng or Rng(0)
    ops = schedule_ops(kind, params, rng.spawn(1))
    data_rng = rng.spawn(2)
    segments = [_segment(base_test, op, params, data_rng.spawn(i)) for i, op in enumerate(ops)]
    return DomainStream(segments, params.batch_size)


# ---------------------------------------------------------------- augmentation


@dataclass
class AugmentParams:
    jitter: float = 0.1
    drop_prob: float = 0.05
    rotation: float = 0.15  # radians, max angle of each coordinate-pair rotation
    scale: float = 0.05
    max_norm: float | None = None  # cap on ||x' - x|| per row


def augment(x: np.ndarray, count: int, rng: Rng, params: AugmentParams | None = None) -> list[np.ndarray]:
    """``count`` perturbed copies of ``x`` (jitter, dropout, pair rotation, scaling)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    p = params or AugmentParams()
    n, d = x.shape
    out = []
    for _ in range(count):
        a = x * (1.0 + p.scale * rng.uniform(size=(n, 1), low=-1.0, high=1.0))
        if p.rotation > 0 and d >= 2:
            i, j = rng.permutation(d)[:2]
            th = rng.uniform(size=n, low=-p.rotation, high=p.rotation)
            c, s = np.cos(th), np.sin(th)
            ai, aj = a[:, i].copy(), a[:, j].copy()
            a[:, i] = c * ai - s * aj
            a[:, j] = s * ai + c * aj
        if p.drop_prob > 0:
            a = a * (rng.random((n, d)) >= p.drop_prob)
        if p.jitter > 0:
            a = a + p.jitter * rng.normal((n, d))
        if p.max_norm is not None:
            delta = a - x
            norm = np.linalg.norm(delta, axis=1, keepdims=True)
            shrink = np.minimum(1.0, p.max_norm / np.maximum(norm, 1e-300))
            a = x + delta * shrink
        out.append(a)
    return out


# ---------------------------------------------------------------- CSV


class CsvParseError(ValueError):
    pass


def load_csv(path, has_labels: bool = True, class_count: int | None = None, header: bool = False):
    """Numeric CSV, optional integer label in the last column."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, rec in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not rec or all(not f.strip() for f in rec):
                continue
            try:
                vals = [float(f) for f in rec]
            except ValueError as exc:
                raise CsvParseError(f"{path}:{lineno}: non-numeric field ({exc})") from None
            if rows and len(vals) != len(rows[0][1]):
                raise CsvParseError(f"{path}:{lineno}: expected {len(rows[0][1])} fields, got {len(vals)}")
            rows.append((lineno, vals))
    if not rows:
        raise CsvParseError(f"{path}: no data rows")
    arr = np.array([v for _, v in rows], dtype=np.float64)
    if not has_labels:
        return arr
    if arr.shape[1] < 2:
        raise CsvParseError(f"{path}: need at least one feature column plus a label")
    labels = arr[:, -1]
    for (lineno, _), lab in zip(rows, labels):
        if lab != int(lab) or lab < 0:
            raise CsvParseError(f"{path}:{lineno}: label {lab} is not a non-negative integer")
        if class_count is not None and lab >= class_count:
            raise CsvParseError(f"{path}:{lineno}: label {int(lab)} >= class count {class_count}")
    labels = labels.astype(np.int64)
    cc = class_count if class_count is not None else int(labels.max()) + 1
    return LabeledDataset(arr[:, :-1], labels, cc)


def save_csv(path, features: np.ndarray, labels=None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for i, row in enumerate(features):
            rec = [repr(float(v)) for v in row]
            if labels is not None:
                rec.append(str(int(labels[i])))
            w.writerow(rec)
