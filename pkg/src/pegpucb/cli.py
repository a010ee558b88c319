"""Command-line entry point: ``pegpucb {run,aggregate,emit,ingest-intel}``.

Exit codes: 0 success, 1 configuration error, 2 some cells failed (the
others are kept), 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .environments import IngestionError, ingest_intel, write_day_csv
from .harness import (
    AggregationError,
    ConfigError,
    ExperimentConfig,
    default_output_dir,
    read_traces,
    run_experiment,
)
from .report import aggregate, emit, read_report_json, write_report_json

EXIT_OK, EXIT_CONFIG, EXIT_CELLS, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("pegpucb")


def _load_config(args) -> ExperimentConfig:
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        data = ExperimentConfig.loads(text).to_dict()
    else:
        data = ExperimentConfig().to_dict()
    for key in ("experiment", "seed", "num_seeds", "horizon", "delta", "noise_std"):
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    if args.algorithms:
        data["algorithms"] = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    if args.data:
        data["problem"] = dict(data.get("problem") or {}, data=args.data)
    data["output_dir"] = args.out or data.get("output_dir") or default_output_dir()
    return ExperimentConfig.from_dict(data)


def cmd_run(args) -> int:
    config = _load_config(args)
    result = run_experiment(
        config,
        workers=args.workers,
        progress=lambda a, s: log.info("finished %s seed %d", a, s),
    )
    report = aggregate(result.traces) if result.traces else None
    out = Path(config.output_dir)
    if report is not None:
        write_report_json(report, out / "report.json")
        for alg in report.algorithms:
            m, s = report.final(alg)
            print(f"{alg:18s} final cumulative regret {m:10.3f} +/- {s:.3f}")
    if result.failures:
        for f in result.failures:
            print(f"FAILED {f.algorithm} seed {f.seed}: {f.error.splitlines()[0]}", file=sys.stderr)
        return EXIT_CELLS
    return EXIT_OK


def cmd_aggregate(args) -> int:
    traces = read_traces(args.traces)
    if not traces:
        raise ConfigError(f"no traces found in {args.traces}")
    report = aggregate(traces)
    out = Path(args.out) if args.out else Path(args.traces) / "report.json"
    write_report_json(report, out)
    print(out)
    return EXIT_OK


def cmd_emit(args) -> int:
    report = read_report_json(args.report)
    for path in emit(report, args.format, args.out):
        print(path)
    return EXIT_OK


def cmd_ingest(args) -> int:
    with open(args.data) as fh:
        day = ingest_intel(fh, args.day, args.interval)
    write_day_csv(day, args.out)
    print(f"{args.out}: {day.matrix.shape[0]} intervals x {len(day.sensors)} sensors; "
          f"dropped {day.dropped}; malformed lines {day.malformed}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pegpucb", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run seeded replications and write traces")
    run.add_argument("--config", help="JSON experiment config")
    run.add_argument("--experiment")
    run.add_argument("--algorithms", help="comma-separated algorithm names")
    run.add_argument("--seed", type=int, help="first seed")
    run.add_argument("--num-seeds", dest="num_seeds", type=int)
    run.add_argument("--horizon", type=int)
    run.add_argument("--delta", type=float)
    run.add_argument("--noise-std", dest="noise_std", type=float)
    run.add_argument("--data", help="raw Intel lab data file (intel experiment)")
    run.add_argument("--out", help="output directory (default $PEGPUCB_OUTPUT or ./results)")
    run.add_argument("--workers", type=int, default=1)
    run.set_defaults(func=cmd_run)

    agg = sub.add_parser("aggregate", help="fold trace CSVs into report.json")
    agg.add_argument("--traces", required=True)
    agg.add_argument("--out")
    agg.set_defaults(func=cmd_aggregate)

    em = sub.add_parser("emit", help="write regret/histogram CSVs or SVG plots")
    em.add_argument("--report", required=True)
    em.add_argument("--format", choices=("csv", "svg"), default="csv")
    em.add_argument("--out", required=True)
    em.set_defaults(func=cmd_emit)

    ing = sub.add_parser("ingest-intel", help="bucket one day of raw Intel data into a CSV matrix")
    ing.add_argument("--data", required=True)
    ing.add_argument("--day", required=True, help="YYYY-MM-DD")
    ing.add_argument("--interval", type=int, default=10)
    ing.add_argument("--out", required=True)
    ing.set_defaults(func=cmd_ingest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, AggregationError, IngestionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
