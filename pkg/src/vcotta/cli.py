"""Command line entry point: ``vcotta <command> [--config FILE] [--set key=value ...]``.

Commands: pretrain, warmup, adapt, sweep, plot, verify. Results go under
``$VCOTTA_OUTPUT_ROOT/<name>`` unless ``output_dir`` is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .numcore import ShapeError

log = logging.getLogger("vcotta")


def _spec(args):
    return harness.load_spec(args.config, args.set or [])


def _out(spec) -> Path:
    out = harness.resolve_output_dir(spec)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_pretrain(args) -> int:
    """Train the deterministic source model and store it as a checkpoint."""
    from .warmup import pretrain_source

    spec = _spec(args)
    rngs = harness._rngs(spec.seed)
    train, _ = harness.make_datasets(spec, rngs["data"])
    det = pretrain_source([train.dim, *spec.dataset.hidden, train.class_count], train, spec.pretrain,
                          rngs["pretrain"])
    path = _out(spec) / "deterministic.ckpt"
    save_checkpoint(det.as_variational(spec.warmup.sigma_init), path,
                    {"seed": spec.seed, "config_hash": spec.config_hash(), "stage": "pretrain",
                     "converged": det.converged})
    print(path)
    return 0


def cmd_warmup(args) -> int:
    """Pretrain (or load ``--from``) and run the variational warm-up; stores source.ckpt."""
    from .warmup import DeterministicNet, variational_warmup

    spec = _spec(args)
    rngs = harness._rngs(spec.seed)
    train, _ = harness.make_datasets(spec, rngs["data"])
    if args.from_checkpoint:
        net = load_checkpoint(args.from_checkpoint)
        det = DeterministicNet([l.weight.mu for l in net.layers], [l.bias.mu.ravel() for l in net.layers],
                               [l.activation for l in net.layers], net.class_count, True)
        source, report = variational_warmup(det, train, spec.warmup, rngs["warmup"]), {}
    else:
        prepared = harness.prepare_source(spec)
        source, report = prepared.source, prepared.warmup_report
    out = _out(spec)
    save_checkpoint(source, out / "source.ckpt",
                    {"seed": spec.seed, "config_hash": spec.config_hash(), "stage": "warmup"})
    summary = {k: v for k, v in report.items() if isinstance(v, (int, float, bool))}
    (out / "warmup.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(out / "source.ckpt")
    return 0


def cmd_adapt(args) -> int:
    spec = _spec(args)
    record = harness.run_experiment(spec)
    print(f"{spec.method} {spec.schedule}: mean error {record.segment_mean('error'):.4f}, "
          f"nll {record.segment_mean('nll'):.4f}, brier {record.segment_mean('brier'):.4f}")
    print(harness.resolve_output_dir(spec))
    return 0


def cmd_sweep(args) -> int:
    spec = _spec(args)
    if spec.output_dir is None:
        spec.output_dir = str(harness.resolve_output_dir(spec))
    values = [v for v in (args.values or "").split(",") if v] or None
    rows = harness.sweep(spec, args.axis, values)
    sys.stdout.write(harness.summary_csv(rows))
    return 0 if all(r["status"] in ("ok", "summary") for r in rows) else 1


def cmd_plot(args) -> int:
    from .plots import emit_plot

    if args.kind == "batch_size_curve":
        # inputs are sweep_batch_size.csv files, one per method
        curve, sizes = {}, None
        for path in args.runs:
            rows = [r for r in harness.read_summary_csv(path) if r["status"] == "ok"]
            sizes = [r["value"] for r in rows]
            curve[Path(path).parent.name] = [float(r["error"]) for r in rows]
        emit_plot({}, args.kind, args.out, batch_sizes=sizes, curve=curve)
    else:
        records = {}
        for path in args.runs:
            p = Path(path)
            csv_path = p / "batches.csv" if p.is_dir() else p
            records[p.name if p.is_dir() else p.parent.name] = harness.read_record_csv(csv_path)
        emit_plot(records, args.kind, args.out, segments_per_loop=args.segments_per_loop)
    print(args.out)
    return 0


def cmd_verify(args) -> int:
    from . import verify

    which = None
    if args.criteria:
        which = [int(c) for c in args.criteria.split(",")]
    elif not args.full:
        which = [c.criterion for c in verify.PROPERTY_CHECKS]
    results = verify.run_checks(which)
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vcotta", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML experiment file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a field, e.g. adapt.learning_rate=0.1 (repeatable)")
        return p

    with_config(sub.add_parser("pretrain", help="train the deterministic source model")).set_defaults(fn=cmd_pretrain)
    p = with_config(sub.add_parser("warmup", help="variational warm-up of the source model"))
    p.add_argument("--from", dest="from_checkpoint", help="deterministic checkpoint from `pretrain`")
    p.set_defaults(fn=cmd_warmup)
    with_config(sub.add_parser("adapt", help="run one experiment over a test stream")).set_defaults(fn=cmd_adapt)
    p = with_config(sub.add_parser("sweep", help="one run per value of an axis"))
    p.add_argument("--axis", required=True, choices=harness.SWEEP_AXES)
    p.add_argument("--values", help="comma-separated values (mixture_weights defaults to 1,0.5,0,adaptive)")
    p.set_defaults(fn=cmd_sweep)
    p = sub.add_parser("plot", help="SVG chart from stored runs")
    p.add_argument("--kind", required=True, choices=("per_segment_error", "loop_curve", "batch_size_curve"))
    p.add_argument("--out", required=True)
    p.add_argument("--segments-per-loop", type=int, default=15)
    p.add_argument("runs", nargs="+", help="run directories or batches.csv files (sweep CSVs for batch_size_curve)")
    p.set_defaults(fn=cmd_plot)
    p = sub.add_parser("verify", help="run the acceptance checks")
    p.add_argument("--full", action="store_true", help="include the multi-minute stream experiments")
    p.add_argument("--criteria", help="comma-separated criterion numbers")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
