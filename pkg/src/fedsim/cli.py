"""Command-line front end.

Exit codes: 0 success, 2 configuration or usage problem, 3 training divergence
or another round failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from collections import Counter
from pathlib import Path
from typing import List, Optional, Sequence

from fedsim import __version__
from fedsim.config import ExperimentConfig, load_config
from fedsim.engine import RoundLog, build_shards_for, convergence_score, run_experiment
from fedsim.errors import ConfigError, FedSimError, RoundError
from fedsim.metrics import METRIC_COLUMNS, RECORD_FIELDS, summary_stats

log = logging.getLogger("fedsim")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

ROUNDS_HEADER = (
    "round", "cum_time_s", "round_time_s", "lr", "epochs", "n_selected", "agg_loss", "mean_dice",
) + METRIC_COLUMNS
SCANS_HEADER = ("collaborator_id", "scan_id") + METRIC_COLUMNS
SUMMARY_HEADER = ("metric", "mu", "sigma", "q1", "q2", "q3")
COMPARISON_HEADER = ("aggregator", "hyper", "final_mean_dice", "convergence_score")
PARTITION_HEADER = ("collaborator_id", "n_train", "n_val", "pct")

GRID_AGGREGATORS = ("fedavg", "fednova", "fedavgm")
GRID_HYPERS = ("constant", "lr_plateau", "adaptive_epoch", "adaptive_epoch+lr_plateau")


def fmt(x) -> str:
    if isinstance(x, (int,)) and not isinstance(x, bool):
        return str(x)
    return format(float(x), ".6g")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def round_row(entry: RoundLog) -> List[str]:
    m = entry.metrics
    return [
        fmt(entry.round),
        fmt(entry.cum_time),
        fmt(entry.round_time),
        fmt(entry.lr_used),
        fmt(entry.epochs),
        fmt(len(entry.selected)),
        fmt(entry.agg_loss),
        fmt(m.mean_dice),
    ] + [fmt(getattr(m, c)) for c in METRIC_COLUMNS]


def rounds_csv(logs: Sequence[RoundLog]) -> str:
    return _csv_text(ROUNDS_HEADER, [round_row(e) for e in logs])


def scans_csv(entry: Optional[RoundLog]) -> str:
    rows = []
    if entry is not None:
        for s in entry.scan_metrics:
            rows.append([s.collaborator_id, str(s.scan_id)] + [fmt(getattr(s.metrics, c)) for c in METRIC_COLUMNS])
    return _csv_text(SCANS_HEADER, rows)


def summary_rows(scan_rows: Sequence[dict]):
    rows = []
    for col in METRIC_COLUMNS:
        stats = summary_stats(float(r[col]) for r in scan_rows)
        rows.append([col] + [fmt(v) for v in stats])
    return rows


def _write_run(out: Path, config: ExperimentConfig, logs: Sequence[RoundLog]):
    write_atomic(out / "rounds.csv", rounds_csv(logs))
    final = logs[-1] if logs else None
    write_atomic(out / "final_scans.csv", scans_csv(final))
    if final is not None:
        # Summarize the values as written, so `summarize` on this run reproduces summary.csv.
        scan_dicts = [{c: fmt(getattr(s.metrics, c)) for c in METRIC_COLUMNS} for s in final.scan_metrics]
        write_atomic(out / "summary.csv", _csv_text(SUMMARY_HEADER, summary_rows(scan_dicts)))
    manifest = {
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "tool_version": __version__,
        "rounds_completed": len(logs),
        "sim_time_start_s": 0.0,
        "sim_time_end_s": final.cum_time if final else 0.0,
        "convergence_score": convergence_score(logs) if logs else None,
        "selection_counts": dict(sorted(Counter(c for e in logs for c in e.selected).items())),
        "outputs": {
            "rounds": "rounds.csv",
            "final_scans": "final_scans.csv",
            "summary": "summary.csv" if final else None,
        },
        "config": config.to_dict(),
    }
    write_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _workers(args) -> int:
    if args.workers is not None:
        return args.workers
    env = os.environ.get("FEDSIM_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"FEDSIM_WORKERS must be an integer, got {env!r}")
    return 1


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, rounds=args.rounds)


def execute(config: ExperimentConfig, out: Path, workers: int = 1):
    """Run one experiment and write its files. Returns ``(logs, error)``."""
    try:
        logs = run_experiment(config, workers=workers)
        error = None
    except RoundError as exc:
        logs = getattr(exc, "partial_logs", [])
        error = exc
    _write_run(out, config, logs)
    return logs, error


def cmd_run(args) -> int:
    config = _load(args)
    out = Path(args.out or config.output.dir or "fedsim-run")
    logs, error = execute(config, out, _workers(args))
    if error is not None:
        print(f"error: {error} ({len(logs)} rounds written to {out})", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"{len(logs)} rounds -> {out}/rounds.csv (final mean dice {fmt(logs[-1].mean_dice)})")
    return EXIT_OK


def _split_axis(text: Optional[str], default):
    if text is None:
        return list(default)
    return [t.strip() for t in text.split(",") if t.strip()]


def cmd_sweep(args) -> int:
    base = _load(args)
    aggregators = _split_axis(args.aggregators, GRID_AGGREGATORS)
    hypers = _split_axis(args.hypers, GRID_HYPERS)
    cells = []
    # Validate the whole grid before running anything.
    for agg in aggregators:
        for hyp in hypers:
            cells.append((agg, hyp, base.with_overrides(**{"aggregator.name": agg, "hyper.name": hyp})))
    out = Path(args.out or base.output.dir or "fedsim-sweep")
    workers = _workers(args)
    rows, failures = [], []
    for agg, hyp, cfg in cells:
        logs, error = execute(cfg, out / f"{agg}__{hyp}", workers)
        if error is not None:
            log.error("cell %s x %s failed: %s", agg, hyp, error)
            failures.append([agg, hyp, str(error)])
            continue
        rows.append([agg, hyp, fmt(logs[-1].mean_dice), fmt(convergence_score(logs))])
    write_atomic(out / "comparison.csv", _csv_text(COMPARISON_HEADER, rows))
    if failures:
        write_atomic(out / "failures.csv", _csv_text(("aggregator", "hyper", "error"), failures))
        print(f"{len(failures)} of {len(cells)} cells failed; see {out}/failures.csv", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"{len(rows)} cells -> {out}/comparison.csv")
    return EXIT_OK


def read_csv(path: Path, header: Sequence[str], numeric: Sequence[str] = ()) -> List[dict]:
    """Read a CSV with an exact header; malformed rows raise ``ConfigError`` with the line number."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            got = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}:1: file is empty")
        if tuple(got) != tuple(header):
            raise ConfigError(f"{path}:1: unexpected header")
        rows = []
        for row in reader:
            line = reader.line_num
            if len(row) != len(header):
                raise ConfigError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            rec = dict(zip(header, row))
            for col in numeric:
                try:
                    float(rec[col])
                except ValueError:
                    raise ConfigError(f"{path}:{line}: column {col!r} is not a number: {rec[col]!r}")
            rows.append(rec)
    return rows


def _run_dir(path: Path) -> Path:
    return path if path.is_dir() else path.parent


def summarize(rounds_path: Path) -> List[List[str]]:
    """Table of mu / sigma / quartiles per metric over the final round's validation scans."""
    run_dir = _run_dir(rounds_path)
    rounds = read_csv(run_dir / "rounds.csv", ROUNDS_HEADER, ROUNDS_HEADER)
    if not rounds:
        raise ConfigError(f"{run_dir / 'rounds.csv'}: no rounds recorded")
    scans = read_csv(run_dir / "final_scans.csv", SCANS_HEADER, METRIC_COLUMNS)
    if not scans:
        raise ConfigError(f"{run_dir / 'final_scans.csv'}: no validation scans recorded")
    return summary_rows(scans)


def cmd_summarize(args) -> int:
    rows = summarize(Path(args.path))
    sys.stdout.write(_csv_text(SUMMARY_HEADER, rows))
    return EXIT_OK


def cmd_describe_partition(args) -> int:
    config = _load(args)
    shards = build_shards_for(config)
    total = sum(s.size for s in shards)
    rows = [[s.collaborator_id, str(s.n_train), str(s.n_val), fmt(100.0 * s.size / total)] for s in shards]
    sys.stdout.write(_csv_text(PARTITION_HEADER, rows))
    return EXIT_OK


def cmd_plot_data(args) -> int:
    if args.metric not in ROUNDS_HEADER:
        raise ConfigError(f"unknown metric {args.metric!r}; choose a rounds.csv column")
    for path in args.runs:
        run_dir = _run_dir(Path(path))
        rounds = read_csv(run_dir / "rounds.csv", ROUNDS_HEADER, ROUNDS_HEADER)
        text = _csv_text(("time_s", args.metric), [[r["cum_time_s"], r[args.metric]] for r in rounds])
        if args.out:
            write_atomic(Path(args.out) / f"{run_dir.name}.{args.metric}.csv", text)
        else:
            sys.stdout.write(f"# {run_dir}\n{text}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fedsim {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        if out:
            p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--rounds", type=int)
        p.add_argument("--workers", type=int, help="parallel local-training threads (env FEDSIM_WORKERS)")

    p = sub.add_parser("run", help="run one experiment")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="aggregator x hyper-policy grid")
    common(p)
    p.add_argument("--aggregators", help="comma-separated, default: " + ",".join(GRID_AGGREGATORS))
    p.add_argument("--hypers", help="comma-separated, default: " + ",".join(GRID_HYPERS))
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("summarize", help="per-metric statistics of a finished run")
    p.add_argument("path", help="run directory or its rounds.csv")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("describe-partition", help="print the shard table as CSV")
    common(p, out=False)
    p.set_defaults(func=cmd_describe_partition)

    p = sub.add_parser("plot-data", help="(time, metric) series for external plotting")
    p.add_argument("runs", nargs="+", help="run directories or rounds.csv files")
    p.add_argument("--metric", default="mean_dice")
    p.add_argument("--out", help="directory for one CSV per run (default: stdout)")
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FedSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
