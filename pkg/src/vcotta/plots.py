"""SVG charts of run records: per-segment errors, loop curves, batch-size curves."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import RunRecord  # noqa: E402

PLOT_KINDS = ("per_segment_error", "loop_curve", "batch_size_curve")


def _save(fig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context({"svg.hashsalt": "vcotta", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def loop_errors(record: RunRecord, segments_per_loop: int) -> list[float]:
    """Mean error per loop, averaging that loop's segment means."""
    segs = record.segments()
    n_loops = len(segs) // segments_per_loop
    return [float(np.mean([s["error"] for s in segs[i * segments_per_loop:(i + 1) * segments_per_loop]]))
            for i in range(n_loops)]


def emit_plot(records: dict[str, RunRecord] | RunRecord, kind: str, path, *,
              segments_per_loop: int = 15, batch_sizes: list | None = None,
              curve: dict[str, list[float]] | None = None) -> Path:
    """Write an SVG chart.

    ``per_segment_error``: one bar group per segment, one bar per record.
    ``loop_curve``: error per loop (x ticks 1..n loops), one line per record.
    ``batch_size_curve``: ``curve`` maps method -> errors aligned with ``batch_sizes``.
    """
    if kind not in PLOT_KINDS:
        raise ValueError(f"plot kind must be one of {PLOT_KINDS}")
    if isinstance(records, RunRecord):
        records = {"run": records}
    if kind != "batch_size_curve" and (not records or any(len(r) == 0 for r in records.values())):
        raise ValueError("nothing to plot")
    fig, ax = plt.subplots(figsize=(7, 3.5))
    if kind == "per_segment_error":
        width = 0.8 / len(records)
        labels = None
        for j, (name, rec) in enumerate(records.items()):
            segs = rec.segments()
            xs = np.arange(len(segs)) + j * width
            ax.bar(xs, [100 * s["error"] for s in segs], width=width, label=name)
            labels = [f"{s['corruption']}:{s['severity']}" for s in segs]
        ax.set_xticks(np.arange(len(labels)) + 0.4 - width / 2)
        ax.set_xticklabels(labels, rotation=70, fontsize=6)
        ax.set_ylabel("error (%)")
    elif kind == "loop_curve":
        n = None
        for name, rec in records.items():
            errs = loop_errors(rec, segments_per_loop)
            n = len(errs)
            ax.plot(np.arange(1, n + 1), [100 * e for e in errs], marker="o", label=name)
        ax.set_xticks(np.arange(1, n + 1))
        ax.set_xlabel("loop")
        ax.set_ylabel("error (%)")
    else:
        if not curve or not batch_sizes:
            raise ValueError("batch_size_curve needs batch_sizes and curve")
        for name, errs in curve.items():
            ax.plot(range(len(batch_sizes)), [100 * e for e in errs], marker="o", label=name)
        ax.set_xticks(range(len(batch_sizes)))
        ax.set_xticklabels([str(b) for b in batch_sizes])
        ax.set_xlabel("batch size")
        ax.set_ylabel("error (%)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
    return Path(path)
