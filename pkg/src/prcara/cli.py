"""Command-line entry points.

Subcommands: ``gen-data`` (physics-based training set), ``train`` (estimator
weights), ``simulate`` (density sweep to CSV), ``trace export|validate``
(mobility files) and ``default-config``. Exit codes: 0 success, 2 bad
configuration or arguments, 3 runtime failure, 4 violated invariant. The
``PRCARA_LOG`` environment variable sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    RunConfig,
    config_hash,
    config_to_dict,
    load_config,
    save_config,
    with_overrides,
)
from .engine import InvariantError, RunMetrics, run_monte_carlo, run_replica
from .estimator import (
    NEAR_DISTANCE_RANGE_M,
    TrainConfig,
    TrainingDivergedError,
    generate_dataset,
    load_dataset_csv,
    save_dataset_csv,
    save_weights,
)
from .scenario import TraceFormatError, export_trace, generate_highway, ingest_trace
from .schedulers import SchedulerKind

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_INVARIANT = 4


def _setup_logging() -> None:
    level = os.environ.get("PRCARA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _load(args) -> RunConfig:
    if args.config:
        return load_config(args.config)
    return RunConfig()


def _parse_list(text, conv):
    return tuple(conv(part) for part in text.split(",") if part)


def cmd_gen_data(args) -> int:
    config = _load(args)
    rng = np.random.default_rng(args.seed)
    samples = generate_dataset(rng, args.n, config.channel, config.budget)
    save_dataset_csv(samples, args.out)
    lo, hi = NEAR_DISTANCE_RANGE_M
    near = [s.d_h_m for s in samples if s.i_h] + [s.d_e_m for s in samples if s.i_e]
    bad = sum(1 for d in near if not lo <= d <= hi)
    print(f"wrote {len(samples)} samples to {args.out}")
    span = f"[{min(near):.1f}, {max(near):.1f}] m" if near else "n/a"
    print(
        f"range audit: near nodes={len(near)} near-distance span {span} out-of-range={bad}"
    )
    if bad:
        print("error: near-node distances outside the generative range", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load(args)
    samples = load_dataset_csv(args.data) if args.data else None
    train_config = TrainConfig(
        n_samples=args.n,
        batch_size=args.batch_size,
        epochs=args.epochs,
        channel=config.channel,
        budget=config.budget,
    )
    rng = np.random.default_rng(args.seed)
    from .estimator import train as train_fn

    net, report = train_fn(rng, train_config, samples=samples)
    save_weights(net, args.out)
    if args.report:
        with Path(args.report).open("w") as fh:
            for row in report["epochs"]:
                fh.write(json.dumps(row) + "\n")
            summary = {k: v for k, v in report.items() if k != "epochs"}
            fh.write(json.dumps(summary) + "\n")
    print(
        f"trained on {report['n_train']} samples; holdout MSE "
        f"{report['holdout_mse_db2']:.3f} dB^2 (baseline {report['baseline_mse_db2']:.3f})"
    )
    print(f"weights written to {args.out}")
    return EXIT_OK


_AGGREGATE_COLUMNS = ["rho", "scheduler", "n_replicas"]
_AGGREGATE_COLUMNS += list(RunMetrics.FIELDS)
_AGGREGATE_COLUMNS += [f"ci_{name}" for name in RunMetrics.FIELDS]


def cmd_simulate(args) -> int:
    config = _load(args)
    config = with_overrides(
        config,
        rho_list=_parse_list(args.rho, float) if args.rho else None,
        schedulers=tuple(SchedulerKind(s) for s in _parse_list(args.scheduler, str))
        if args.scheduler
        else None,
        seeds=_parse_list(args.seed, int) if args.seed else None,
        out_dir=args.out,
        estimator_weights=args.weights,
    )
    if config.needs_estimator():
        if not config.estimator_weights:
            print(
                "error: the requested schedulers need estimator weights "
                "(train them first, then pass --weights)",
                file=sys.stderr,
            )
            return EXIT_CONFIG
        if not Path(config.estimator_weights).exists():
            print(f"error: weight file {config.estimator_weights} not found", file=sys.stderr)
            return EXIT_CONFIG

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = run_monte_carlo(config, jobs=args.jobs)

    aggregate_path = out_dir / "aggregate.csv"
    with aggregate_path.open("w") as fh:
        fh.write(",".join(_AGGREGATE_COLUMNS) + "\n")
        for row in rows:
            cells = [repr(row.rho), row.scheduler.value, str(row.n_replicas)]
            cells += [repr(row.mean[name]) for name in RunMetrics.FIELDS]
            cells += [repr(row.ci95[name]) for name in RunMetrics.FIELDS]
            fh.write(",".join(cells) + "\n")

    if args.records:
        for rho in config.rho_list:
            for scheduler in config.schedulers:
                for seed in config.seeds:
                    result = run_replica(config, rho, scheduler, seed, keep_records=True)
                    name = f"records_rho{rho:g}_{scheduler.value}_seed{seed}.csv"
                    with (out_dir / name).open("w") as fh:
                        fh.write("sender,stream,l,c,t,target,outcome,sinr_db\n")
                        for r in result.records:
                            fh.write(
                                f"{r.sender},{r.stream},{r.l},{r.cell.c},{r.cell.t},"
                                f"{r.target},{r.outcome.value},{repr(r.sinr_db)}\n"
                            )

    manifest = {
        "version": __version__,
        "config_hash": config_hash(config),
        "config": config_to_dict(config),
        "seeds": list(config.seeds),
        "gamma0_db": config.thresholds.gamma0_db,
        "gamma_sci_db": config.thresholds.gamma_sci_db,
        "jobs": args.jobs,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {aggregate_path} ({len(rows)} rows) and manifest.json")
    return EXIT_OK


def cmd_trace(args) -> int:
    if args.action == "export":
        config = _load(args)
        rng = np.random.default_rng(args.seed)
        vehicles = generate_highway(rng, config.scenario)
        export_trace(args.out, vehicles, config.scenario, step_ms=args.step_ms)
        print(f"wrote trace for {len(vehicles)} vehicles to {args.out}")
        return EXIT_OK
    try:
        trace = ingest_trace(args.path)
    except TraceFormatError as exc:
        print(f"invalid trace: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{args.path}: ok ({len(trace.vehicles)} vehicles, {len(trace.times_ms)} snapshots)")
    return EXIT_OK


def cmd_default_config(args) -> int:
    config = RunConfig()
    if args.out:
        save_config(config, args.out)
        print(f"wrote defaults to {args.out}")
    else:
        print(json.dumps(config_to_dict(config), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prcara", description=__doc__)
    parser.add_argument("--version", action="version", version=f"prcara {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a physics-based training dataset")
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--n", type=int, default=100_000, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the proactive RSSI estimator")
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--data", help="training dataset CSV (generated when omitted)")
    p.add_argument("--n", type=int, default=100_000, help="samples to generate if no --data")
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="weight file path")
    p.add_argument("--report", help="JSON-lines training report path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="run the configured density sweep")
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--rho", help="comma-separated densities, overrides config")
    p.add_argument("--scheduler", help="comma-separated scheduler names, overrides config")
    p.add_argument("--seed", help="comma-separated seeds, overrides config")
    p.add_argument("--out", help="output directory, overrides config")
    p.add_argument("--weights", help="estimator weight file")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--records", action="store_true", help="also write per-replica records")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("trace", help="mobility trace utilities")
    trace_sub = p.add_subparsers(dest="action", required=True)
    pe = trace_sub.add_parser("export", help="synthesize a trace from the generator")
    pe.add_argument("--config", help="run configuration JSON")
    pe.add_argument("--seed", type=int, default=0)
    pe.add_argument("--step-ms", type=int, default=100)
    pe.add_argument("--out", required=True)
    pe.set_defaults(func=cmd_trace, action="export")
    pv = trace_sub.add_parser("validate", help="check a trace file")
    pv.add_argument("path")
    pv.set_defaults(func=cmd_trace, action="validate")

    p = sub.add_parser("default-config", help="print or write the default configuration")
    p.add_argument("--out")
    p.set_defaults(func=cmd_default_config)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (TrainingDivergedError, TraceFormatError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
