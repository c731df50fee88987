"""Error rate, NLL, Brier score and run-record aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import DomainError, ShapeError

PROB_FLOOR = 1e-12


def _check_labels(probs, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (probs.shape[0],):
        raise ShapeError("one label per row required")
    if np.any(labels < 0) or np.any(labels >= probs.shape[1]):
        raise DomainError("label out of range")
    return labels


def error_rate(pred_labels, true_labels) -> float:
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape or pred.size == 0:
        raise ShapeError("label vectors must be non-empty and of equal length")
    return float(np.mean(pred != true))


def nll(probs, true_labels) -> float:
    labels = _check_labels(probs, true_labels)
    p = probs[np.arange(labels.size), labels]
    return float(-np.log(np.maximum(p, PROB_FLOOR)).mean())


def brier(probs, true_labels) -> float:
    labels = _check_labels(probs, true_labels)
    onehot = np.zeros_like(probs)
    onehot[np.arange(labels.size), labels] = 1.0
    return float(((probs - onehot) ** 2).sum(axis=1).mean())


BATCH_COLUMNS = (
    "batch",
    "segment",
    "corruption",
    "severity",
    "n",
    "error",
    "nll",
    "brier",
    "source_error",
    "teacher_error",
    "alpha",
    "loss_total",
    "loss_ce",
    "loss_kl_source",
    "loss_kl_teacher",
    "skipped",
)

SEGMENT_COLUMNS = ("segment", "corruption", "severity", "batches", "error", "nll", "brier", "source_error",
                   "teacher_error", "alpha")
_SEGMENT_MEANS = ("error", "nll", "brier", "source_error", "teacher_error", "alpha")


@dataclass
class RunRecord:
    entries: list[dict] = field(default_factory=list)
    events: list[str] = field(default_factory=list)

    def add(self, **row) -> None:
        row = {k: row.get(k, float("nan")) for k in BATCH_COLUMNS}
        row["batch"] = len(self.entries)
        self.entries.append(row)

    def __len__(self):
        return len(self.entries)

    def segments(self) -> list[dict]:
        """Per-segment arithmetic means of the batch metrics."""
        out = []
        for seg in sorted({e["segment"] for e in self.entries}):
            rows = [e for e in self.entries if e["segment"] == seg]
            out.append(
                {
                    "segment": seg,
                    "corruption": rows[0]["corruption"],
                    "severity": rows[0]["severity"],
                    "batches": len(rows),
                    **{k: float(np.mean([r[k] for r in rows])) for k in _SEGMENT_MEANS},
                }
            )
        return out

    def overall(self, key: str = "error") -> float:
        """Mean over batches of ``key`` (nan when empty)."""
        if not self.entries:
            return float("nan")
        return float(np.mean([e[key] for e in self.entries]))

    def segment_mean(self, key: str = "error") -> float:
        """Unweighted mean over segments, the table-style average."""
        segs = self.segments()
        if not segs:
            return float("nan")
        return float(np.mean([s[key] for s in segs]))
