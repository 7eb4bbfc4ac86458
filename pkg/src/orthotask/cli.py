"""Command-line entry point.

Exit codes: 0 success, 1 invalid usage or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data, runs
from .config import ConfigError, parse_config, parse_grid, serialize
from .instrument import CosineRecorder, fmt_real

log = logging.getLogger("orthotask")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; this CLI reserves 2 for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="orthotask", description="Multi-task training with orthogonal task-gradient regularization.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("build-dataset", help="compose MultiDigitMNIST splits from MNIST IDX files")
    b.add_argument("--mnist-dir", required=True, type=Path)
    b.add_argument("--out", required=True, type=Path)
    b.add_argument("--seed", required=True, type=int, help="seeds both the split plan and composition")
    b.add_argument("--plan", choices=("full", "desk"), default="full")
    b.add_argument("--samples-per-pair", type=int, default=None)
    b.add_argument("--dry-run", action="store_true")

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    t.add_argument("--dry-run", action="store_true")

    s = sub.add_parser("sweep", help="train every grid configuration x seed")
    s.add_argument("--grid", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--dry-run", action="store_true")

    a = sub.add_parser("analyze", help="first-epoch sigma vs final accuracy table of a sweep")
    a.add_argument("--runs", required=True, type=Path)
    a.add_argument("--out", required=True, type=Path)

    e = sub.add_parser("export-stats", help="export a run's cosine records and summaries")
    e.add_argument("--run", required=True, type=Path)
    e.add_argument("--format", required=True, choices=("csv", "json"))
    e.add_argument("--out", required=True, type=Path)
    return p


def _build_dataset(args) -> int:
    if args.samples_per_pair is not None and args.samples_per_pair <= 0:
        raise UsageError("--samples-per-pair must be positive")
    if args.plan == "full":
        plan = data.plan_splits(args.seed, samples_per_pair=args.samples_per_pair or 1000)
    else:
        plan = data.desk_plan(args.seed, samples_per_pair=args.samples_per_pair or 250)
    if args.dry_run:
        print(json.dumps({"mnist_dir": str(args.mnist_dir), "out": str(args.out), "plan": plan.to_dict(), "counts": plan.counts}, indent=2))
        return EXIT_OK
    images, labels = data.load_mnist(args.mnist_dir)
    splits = data.build_dataset(images, labels, plan, args.seed)
    runs.write_dataset(args.out, splits, plan)
    for name, ds in splits.items():
        print(f"{name}: {len(ds)} samples")
    return EXIT_OK


def _train(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be >= 0")
        cfg = cfg.replace(seed=args.seed)
    if args.dry_run:
        print(serialize(cfg), end="")
        return EXIT_OK
    dataset = runs.load_data(cfg, args.config.parent)
    result = runs.run_one(cfg, dataset, args.out)
    if result.failed:
        print(f"run failed: {result.error}", file=sys.stderr)
        return EXIT_RUNTIME
    sigma = ", ".join(f"{k}={fmt_real(v)}" for k, v in result.first_epoch_sigma.items())
    print(f"final harmonic accuracy {result.final_harmonic}; first-epoch sigma {sigma}")
    return EXIT_OK


def _sweep(args) -> int:
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    grid = parse_grid(args.grid)
    configs = grid.configs()
    jobs = runs.sweep_jobs(configs, grid.seeds)
    if args.dry_run:
        for i, c in enumerate(jobs):
            print(runs.run_name(i, c))
        print(f"{len(jobs)} runs")
        return EXIT_OK
    results = runs.sweep(configs, grid.seeds, args.out, args.workers, base=args.grid.parent)
    failed = [r for r in results if r.failed]
    print(f"{len(results) - len(failed)} of {len(results)} runs finished")
    for r in failed:
        print(f"failed: {r.config.baseline} seed {r.config.seed}: {r.error}", file=sys.stderr)
    return EXIT_RUNTIME if len(failed) == len(results) else EXIT_OK


def _analyze(args) -> int:
    points, rho = runs.analyze(args.runs, args.out)
    print(f"{len(points)} runs")
    print("spearman(first-epoch sigma, final accuracy) = " + ("n/a" if rho is None else fmt_real(rho)))
    return EXIT_OK


def _export_stats(args) -> int:
    recorder = CosineRecorder.load(args.run / "cosines.csv")
    recorder.export(args.out, args.format)
    return EXIT_OK


COMMANDS = {
    "build-dataset": _build_dataset,
    "train": _train,
    "sweep": _sweep,
    "analyze": _analyze,
    "export-stats": _export_stats,
}


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
