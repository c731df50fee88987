"""Experiment specs, the end-to-end pipeline, baselines, sweeps and result files."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .bnn import ForwardCache, VariationalNet, apply_sgd, backward, clone_frozen, forward, forward_mean
from .checkpoint import load_checkpoint, save_checkpoint
from .engine import AdaptConfig, BatchPrediction, EngineState, _score, run_stream
from .metrics import BATCH_COLUMNS, SEGMENT_COLUMNS, RunRecord
from .numcore import Rng, argmax_rows, softmax_rows
from .objectives import mean_entropy
from .stream import AugmentParams, LabeledDataset, ScheduleParams, build_schedule, make_blobs
from .warmup import DeterministicNet, PretrainConfig, WarmupConfig, pretrain_source, variational_warmup

log = logging.getLogger(__name__)

METHODS = ("vcotta", "source_only", "entropy_min_baseline")
SCHEDULES = ("standard", "gradual", "loops", "random_order")
SWEEP_AXES = ("epsilon_margin", "n_augment", "mixture_weights", "batch_size", "learning_rate", "order_seed")
OUTPUT_ROOT_ENV = "VCOTTA_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field path."""


@dataclass
class DatasetParams:
    classes: int = 10
    dim: int = 16
    hidden: tuple[int, ...] = (64, 64)
    train_per_class: int = 200
    test_per_class: int = 100
    spread: float = 1.0
    radius: float = 3.0
    source_csv: str | None = None
    test_csv: str | None = None


@dataclass
class ExperimentSpec:
    name: str = "default"
    seed: int = 0
    method: str = "vcotta"
    schedule: str = "standard"
    order_seed: int | None = None  # seeds the stream alone when set; the source stays fixed
    output_dir: str | None = None
    source_checkpoint: str | None = None
    dataset: DatasetParams = field(default_factory=DatasetParams)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    schedule_params: ScheduleParams = field(default_factory=lambda: ScheduleParams(loops=10))

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method: expected one of {METHODS}, got {self.method!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule: expected one of {SCHEDULES}, got {self.schedule!r}")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def desk_preset() -> ExperimentSpec:
    """Hyperparameters tuned for the synthetic 10-class blob stream."""
    spec = ExperimentSpec()
    spec.dataset.test_per_class = 1000
    spec.adapt = AdaptConfig(learning_rate=0.3, beta_ema=0.95, kl_scale=1e-6, tau=0.2)
    return spec


# ---------------------------------------------------------------- config parsing


def _apply_mapping(obj, mapping: dict, path: str = "") -> None:
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in mapping.items():
        where = f"{path}{key}"
        if key not in names:
            raise ConfigError(f"{where}: unknown key")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping")
            sub = copy.deepcopy(current)
            _apply_mapping(sub, value, where + ".")
            try:
                sub.__post_init__() if hasattr(sub, "__post_init__") else None
            except ValueError as exc:
                raise ConfigError(f"{where}: {exc}") from None
            setattr(obj, key, sub)
            continue
        setattr(obj, key, _coerce(current, value, where))


def _coerce(current, value, where):
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes", "on"):
                    return True
                if value.lower() in ("false", "0", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(current, int) and not isinstance(current, bool):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split()]
            elif not isinstance(value, (list, tuple)):
                value = [value]
            return tuple(type(current[0])(v) if current else v for v in value)
        if current is None and isinstance(value, str):
            try:
                return float(value) if any(c in value for c in ".e") else int(value)
            except ValueError:
                return value
        return value
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot interpret {value!r}") from None


def parse_overrides(items) -> dict:
    """``section.key=value`` strings into a nested mapping (values parsed as YAML scalars)."""
    out: dict = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"{item}: override must look like key=value")
        key, raw = item.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw) if raw.strip() else raw
    return out


def load_spec(path=None, overrides=None, base: ExperimentSpec | None = None) -> ExperimentSpec:
    spec = copy.deepcopy(base) if base is not None else desk_preset()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _apply_mapping(spec, data)
    if overrides:
        _apply_mapping(spec, overrides if isinstance(overrides, dict) else parse_overrides(overrides))
    spec.validate()
    return spec


def dump_spec(spec: ExperimentSpec) -> str:
    return yaml.safe_dump(spec.to_dict(), sort_keys=False)


# ---------------------------------------------------------------- pipeline


@dataclass
class Prepared:
    train: LabeledDataset
    test: LabeledDataset
    det: DeterministicNet | None
    source: VariationalNet
    warmup_report: dict


def _rngs(seed: int) -> dict[str, Rng]:
    root = Rng(seed)
    return {name: root.spawn(i) for i, name in enumerate(("data", "pretrain", "warmup", "schedule", "adapt"))}


def make_datasets(spec: ExperimentSpec, rng: Rng) -> tuple[LabeledDataset, LabeledDataset]:
    from .stream import load_csv

    d = spec.dataset
    if d.source_csv:
        train = load_csv(d.source_csv, has_labels=True, class_count=d.classes)
        test = load_csv(d.test_csv or d.source_csv, has_labels=True, class_count=d.classes)
        return train, test
    train = make_blobs(d.classes, d.dim, d.train_per_class, d.spread, rng.spawn(0), d.radius)
    test = make_blobs(d.classes, d.dim, d.test_per_class, d.spread, rng.spawn(1), d.radius)
    return train, test


def prepare_source(spec: ExperimentSpec) -> Prepared:
    """Datasets, the deterministic source model and its warmed-up Bayesian version."""
    rngs = _rngs(spec.seed)
    train, test = make_datasets(spec, rngs["data"])
    if spec.source_checkpoint:
        source = load_checkpoint(spec.source_checkpoint)
        return Prepared(train, test, None, source, {})
    dims = [train.dim, *spec.dataset.hidden, train.class_count]
    det = pretrain_source(dims, train, spec.pretrain, rngs["pretrain"])
    report: dict = {}
    source = variational_warmup(det, train, spec.warmup, rngs["warmup"], report)
    return Prepared(train, test, det, source, report)


def _aug_params(spec: ExperimentSpec, train: LabeledDataset) -> AugmentParams:
    p = copy.copy(spec.adapt.augment)
    if p.max_norm is None and train.min_separation is not None:
        p.max_norm = 0.5 * train.min_separation
    return p


def run_source_only(source: VariationalNet, stream, cfg: AdaptConfig) -> RunRecord:
    record = RunRecord()
    for seg, op, xb, yb in stream.labeled():
        probs = softmax_rows(forward_mean(source, xb))
        pred = BatchPrediction(probs, probs, probs, 1.0, argmax_rows(probs))
        _score(record, seg, op, yb, pred, None, False)
    return record


def run_entropy_min(source: VariationalNet, stream, cfg: AdaptConfig) -> RunRecord:
    """Baseline: predict with the current model, then one SGD step on its mean
    predictive entropy (mean-weight forward, no teacher and no prior)."""
    model = clone_frozen(source)
    record = RunRecord()
    for seg, op, xb, yb in stream.labeled():
        cache = ForwardCache()
        logits = forward(model, xb, None, cache)
        probs = softmax_rows(logits)
        pred = BatchPrediction(probs, probs, probs, 0.0, argmax_rows(probs))
        value, d = mean_entropy(logits, with_grad=True)
        grads = backward(model, cache, d)
        skipped = not (np.isfinite(value) and grads.is_finite())
        if not skipped:
            apply_sgd(model, grads, cfg.learning_rate)
        _score(record, seg, op, yb, pred, None, skipped)
    return record


def run_pipeline(spec: ExperimentSpec, prepared: Prepared | None = None):
    """Run one experiment in memory. Returns (record, prepared, final engine state or None)."""
    spec.validate()
    prepared = prepared or prepare_source(spec)
    rngs = _rngs(spec.seed)
    sched_rng = rngs["schedule"] if spec.order_seed is None else Rng(spec.order_seed).spawn(3)
    stream = build_schedule(spec.schedule, prepared.test, spec.schedule_params, sched_rng)
    cfg = copy.deepcopy(spec.adapt)
    cfg.augment = _aug_params(spec, prepared.train)
    if spec.method == "source_only":
        return run_source_only(prepared.source, stream, cfg), prepared, None
    if spec.method == "entropy_min_baseline":
        return run_entropy_min(prepared.source, stream, cfg), prepared, None
    state = EngineState.from_source(prepared.source)
    record = run_stream(state, stream, cfg, rngs["adapt"])
    return record, prepared, state


# ---------------------------------------------------------------- emission


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


def record_csv(record: RunRecord) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BATCH_COLUMNS)
    for e in record.entries:
        w.writerow([_fmt(e[k]) for k in BATCH_COLUMNS])
    return buf.getvalue()


def segments_csv(record: RunRecord) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SEGMENT_COLUMNS)
    for s in record.segments():
        w.writerow([_fmt(s[k]) for k in SEGMENT_COLUMNS])
    return buf.getvalue()


_INT_COLUMNS = ("batch", "segment", "severity", "n", "skipped")


def read_record_csv(path) -> RunRecord:
    """Inverse of :func:`record_csv`, for plotting stored runs."""
    record = RunRecord()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(BATCH_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            parsed = {}
            for k in BATCH_COLUMNS:
                if k == "corruption":
                    parsed[k] = row[k]
                elif k in _INT_COLUMNS:
                    parsed[k] = int(row[k])
                else:
                    parsed[k] = float(row[k])
            record.add(**parsed)
    return record


def resolve_output_dir(spec: ExperimentSpec) -> Path:
    if spec.output_dir:
        return Path(spec.output_dir)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / spec.name


def run_experiment(spec: ExperimentSpec, write: bool = True):
    """Full pipeline plus result files: batches.csv, segments.csv, config.yaml,
    source.ckpt (+ .json sidecar) and, for vcotta, student/teacher checkpoints."""
    record, prepared, state = run_pipeline(spec)
    if not write:
        return record
    out = resolve_output_dir(spec)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "batches.csv").write_text(record_csv(record), encoding="utf-8")
        (out / "segments.csv").write_text(segments_csv(record), encoding="utf-8")
        (out / "config.yaml").write_text(dump_spec(spec), encoding="utf-8")
        prov = {"seed": spec.seed, "config_hash": spec.config_hash()}
        save_checkpoint(prepared.source, out / "source.ckpt", prov)
        if state is not None:
            save_checkpoint(state.student, out / "student.ckpt", prov)
            save_checkpoint(state.teacher, out / "teacher.ckpt", prov)
    except OSError as exc:
        raise OSError(f"writing results to {out} failed: {exc}") from exc
    return record


# ---------------------------------------------------------------- sweeps


SUMMARY_COLUMNS = ("axis", "value", "status", "error", "nll", "brier")


def _sweep_variants(template: ExperimentSpec, axis: str, values):
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    if axis == "mixture_weights" and not values:
        values = ["1", "0.5", "0", "adaptive"]
    if not values:
        raise ConfigError("sweep needs at least one value")
    for v in values:
        spec = copy.deepcopy(template)
        if axis == "epsilon_margin":
            spec.adapt.epsilon_margin = float(v)
        elif axis == "n_augment":
            spec.adapt.n_augment = int(v)
        elif axis == "learning_rate":
            spec.adapt.learning_rate = float(v)
        elif axis == "batch_size":
            spec.schedule_params.batch_size = int(v)
        elif axis == "order_seed":
            spec.schedule = "random_order"
            spec.order_seed = int(v)
        elif axis == "mixture_weights":
            if str(v) == "adaptive":
                spec.adapt.alpha_mode = "adaptive"
            else:
                spec.adapt.alpha_mode = "fixed"
                spec.adapt.alpha_fixed = float(v)
        yield str(v), spec


def sweep(template: ExperimentSpec, axis: str, values=None, write: bool = True) -> list[dict]:
    """One run per axis value; failures are recorded and the sweep continues.
    The order_seed axis also appends mean and std rows."""
    rows = []
    shared: dict = {}
    for label, spec in _sweep_variants(template, axis, values):
        spec.name = f"{template.name}_{axis}_{label}"
        if template.output_dir:
            spec.output_dir = str(Path(template.output_dir) / f"{axis}_{label}")
        try:
            # datasets and the warmed-up source depend only on seed and source-side config
            key = (spec.seed, json.dumps(_plain(dataclasses.asdict(spec.dataset))),
                   json.dumps(_plain(dataclasses.asdict(spec.pretrain))),
                   json.dumps(_plain(dataclasses.asdict(spec.warmup))), spec.source_checkpoint)
            if key not in shared:
                shared[key] = prepare_source(spec)
            record, _, _ = run_pipeline(spec, shared[key])
            if write:
                out = resolve_output_dir(spec)
                out.mkdir(parents=True, exist_ok=True)
                (out / "batches.csv").write_text(record_csv(record), encoding="utf-8")
                (out / "segments.csv").write_text(segments_csv(record), encoding="utf-8")
            rows.append({"axis": axis, "value": label, "status": "ok",
                         "error": record.segment_mean("error"), "nll": record.segment_mean("nll"),
                         "brier": record.segment_mean("brier")})
        except Exception as exc:  # noqa: BLE001 - a sweep records failures and moves on
            log.error("sweep %s=%s failed: %s", axis, label, exc)
            rows.append({"axis": axis, "value": label, "status": f"failed: {exc}",
                         "error": float("nan"), "nll": float("nan"), "brier": float("nan")})
    if axis == "order_seed":
        ok = [r for r in rows if r["status"] == "ok"]
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            rows.append({"axis": axis, "value": stat, "status": "summary",
                         **{k: float(fn([r[k] for r in ok])) if ok else float("nan")
                            for k in ("error", "nll", "brier")}})
    if write:
        out = Path(template.output_dir) if template.output_dir else resolve_output_dir(template)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"sweep_{axis}.csv").write_text(summary_csv(rows), encoding="utf-8")
    return rows


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in SUMMARY_COLUMNS])
    return buf.getvalue()


def read_summary_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
