"""Command-line experiment runner.

    fedncm run CONFIG --out DIR [--seeds 0,1,2]
    fedncm summarize DIR
    fedncm --print-defaults

Each (config, seed) writes ``<run_id>.csv`` (per-round metrics) and
``<run_id>.json`` (manifest). ``summary.csv`` and ``budget_curves.json`` are
rebuilt from the manifests after every ``run``. Set ``FEDNCM_THREADS`` to
train a round's clients on several threads.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from collections import defaultdict
from importlib import metadata
from pathlib import Path
from typing import Sequence

from .config import SweepSpec, config_to_dict, dumps, parse_config
from .costs import budget_curve
from .engine import ExperimentConfig, RoundRecord, run_experiment
from .errors import FedNCMError

log = logging.getLogger("fedncm")

CSV_COLUMNS = ("round", "test_accuracy", "cum_bytes_up", "cum_bytes_down", "cum_flops", "l2_from_start")
SUMMARY_FILE = "summary.csv"
CURVES_FILE = "budget_curves.json"


def artifact_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        from . import __version__

        return __version__


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def metrics_csv(records: Sequence[RoundRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow([
            r.round, _fmt(r.test_accuracy), r.cumulative_bytes_up, r.cumulative_bytes_down,
            r.cumulative_flops, _fmt(r.global_param_l2_from_start),
        ])
    return buf.getvalue()


def read_metrics_csv(path: Path) -> list[RoundRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            RoundRecord(
                round=int(row["round"]),
                test_accuracy=float(row["test_accuracy"]),
                cumulative_bytes_up=int(row["cum_bytes_up"]),
                cumulative_bytes_down=int(row["cum_bytes_down"]),
                cumulative_flops=int(row["cum_flops"]),
                global_param_l2_from_start=float(row["l2_from_start"]),
            )
            for row in csv.DictReader(fh)
        ]


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _jobs(obj: ExperimentConfig | SweepSpec, seeds: Sequence[int] | None):
    """Yield ``(config_id, sweep_point, config)`` with the seed applied."""
    if isinstance(obj, SweepSpec):
        points = [(f"{obj.base.name}__{label}", label, cfg) for label, cfg in obj.expand()]
        seeds = seeds or obj.seeds
    else:
        points = [(obj.name, None, obj)]
        seeds = seeds or (obj.seed,)
    for config_id, label, cfg in points:
        for seed in seeds:
            yield config_id, label, cfg.with_seed(seed)


def run_one(cfg: ExperimentConfig, config_id: str, sweep_point: str | None, out: Path) -> Path:
    run_id = f"{config_id}__seed{cfg.seed}"
    csv_path, manifest_path = out / f"{run_id}.csv", out / f"{run_id}.json"
    try:
        train, test = cfg.dataset.load()
        records = run_experiment(cfg, train, test)
        _write_atomic(csv_path, metrics_csv(records))
        manifest = {
            "run_id": run_id,
            "config_id": config_id,
            "sweep_point": sweep_point,
            "seed": cfg.seed,
            "partition_seed": cfg.partition.seed,
            "artifact_version": artifact_version(),
            "config": config_to_dict(cfg),
            "metrics_csv": csv_path.name,
            "rounds_recorded": len(records),
            "final_accuracy": records[-1].test_accuracy,
            "initial_bytes_down": records[-1].initial_bytes_down,
        }
        _write_atomic(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except BaseException:
        for p in (csv_path, manifest_path):
            p.unlink(missing_ok=True)
        raise
    return csv_path


def run(obj: ExperimentConfig | SweepSpec, output_dir: str | Path, seeds: Sequence[int] | None = None) -> int:
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory {out}: {exc}", file=sys.stderr)
        return 2
    for config_id, label, cfg in _jobs(obj, seeds):
        log.info("running %s seed=%d", config_id, cfg.seed)
        try:
            run_one(cfg, config_id, label, out)
        except (FedNCMError, OSError, ValueError) as exc:
            print(f"error: run {config_id} seed {cfg.seed} failed: {exc}", file=sys.stderr)
            return 1
    return summarize(out)


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    mean = sum(values) / len(values)
    return mean, math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))


def summarize(output_dir: str | Path) -> int:
    """Write per-config mean +- population std of final accuracy and per-run budget curves."""
    out = Path(output_dir)
    manifests = []
    for path in sorted(out.glob("*.json")):
        if path.name == CURVES_FILE:
            continue
        try:
            m = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            continue
        if isinstance(m, dict) and "run_id" in m and (out / m.get("metrics_csv", "")).is_file():
            manifests.append(m)
    if not manifests:
        print(f"error: no runs found in {out}", file=sys.stderr)
        return 1

    by_config: dict[str, list[float]] = defaultdict(list)
    curves = {}
    for m in manifests:
        records = read_metrics_csv(out / m["metrics_csv"])
        by_config[m["config_id"]].append(records[-1].test_accuracy)
        offset = m.get("initial_bytes_down", 0)
        curves[m["run_id"]] = {
            "bytes": budget_curve(records, "bytes"),
            "bytes_after_initial_download": [(c - offset, a) for c, a in budget_curve(records, "bytes")],
            "flops": budget_curve(records, "flops"),
        }
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("config_id", "num_seeds", "final_accuracy_mean", "final_accuracy_std"))
    for config_id in sorted(by_config):
        mean, std = _mean_std(by_config[config_id])
        writer.writerow((config_id, len(by_config[config_id]), _fmt(mean), _fmt(std)))
    _write_atomic(out / SUMMARY_FILE, buf.getvalue())
    _write_atomic(out / CURVES_FILE, json.dumps(curves, indent=1, sort_keys=True) + "\n")
    return 0


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds or any(s < 0 for s in seeds):
        raise argparse.ArgumentTypeError("seeds must be a non-empty list of non-negative integers")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedncm", description="Federated head-tuning experiments.")
    parser.add_argument("--print-defaults", action="store_true", help="print the default run config as JSON")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")
    p_run = sub.add_parser("run", help="run a config or sweep")
    p_run.add_argument("config")
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seeds", type=_parse_seeds, default=None, help="comma-separated, overrides the config")
    p_sum = sub.add_parser("summarize", help="rebuild summary tables from run manifests")
    p_sum.add_argument("dir")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.print_defaults:
        sys.stdout.write(dumps(ExperimentConfig()))
        return 0
    if args.command == "run":
        try:
            obj = parse_config(args.config)
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        except FedNCMError as exc:
            print(f"error: config {args.config}: {exc}", file=sys.stderr)
            return 2
        return run(obj, args.out, args.seeds)
    if args.command == "summarize":
        return summarize(args.dir)
    parser.print_help(sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
