"""Run directories, the sweep runner and sweep analysis.

A run directory holds::

    config.cfg     resolved configuration (canonical form)
    metrics.csv    epoch,task,split,loss,accuracy
    cosines.csv    step,epoch,pair,cosine
    result.json    summary of the run

:func:`analyze` recomputes everything it reports from ``metrics.csv`` and
``cosines.csv``, so it does not trust ``result.json``.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from scipy import stats

from . import data
from .config import RunConfig, parse_config, serialize
from .instrument import CosineRecorder, fmt_real
from .train import TASKS, RunResult, TrainingDiverged, harmonic_mean_accuracy, metrics_csv, read_metrics_csv, train

log = logging.getLogger(__name__)

PLAN_FILE = "plan.json"


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def resolve(path: str, base: Path | None) -> Path:
    p = Path(path)
    if base is not None and not p.is_absolute():
        p = base / p
    return p


def make_plan(config: RunConfig) -> data.SplitPlan:
    if config.plan == "full":
        return data.plan_splits(config.plan_seed, samples_per_pair=config.samples_per_pair)
    return data.desk_plan(config.plan_seed, config.train_pairs, config.val_pairs, config.samples_per_pair)


def write_dataset(out_dir, splits: dict[str, data.MultiDigitSet], plan: data.SplitPlan) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, ds in splits.items():
        data.write_split(out_dir / f"{name}.mdm", ds)
    (out_dir / PLAN_FILE).write_text(json.dumps(plan.to_dict(), indent=2) + "\n", encoding="utf-8")


def read_dataset(directory) -> dict[str, data.MultiDigitSet]:
    directory = Path(directory)
    out = {}
    for name in data.SPLITS:
        path = directory / f"{name}.mdm"
        if path.exists():
            out[name] = data.read_split(path)
    if "train" not in out:
        raise FileNotFoundError(f"{directory}: no train.mdm")
    return out


def load_data(config: RunConfig, base: Path | None = None) -> dict[str, data.MultiDigitSet]:
    """The dataset a config points at: a built directory or MNIST plus a plan."""
    if config.dataset_dir:
        return read_dataset(resolve(config.dataset_dir, base))
    if config.mnist_dir:
        images, labels = data.load_mnist(resolve(config.mnist_dir, base))
        return data.build_dataset(images, labels, make_plan(config), config.data_seed)
    raise ValueError("config sets neither dataset_dir nor mnist_dir")


# ---------------------------------------------------------------------------
# Single runs
# ---------------------------------------------------------------------------


def write_run(out_dir, result: RunResult, recorder: CosineRecorder) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.cfg").write_text(serialize(result.config), encoding="utf-8")
    (out_dir / "metrics.csv").write_text(metrics_csv(result.metrics), encoding="utf-8", newline="\n")
    recorder.export(out_dir / "cosines.csv", "csv")
    summary = result.summary()
    summary.pop("wall_time")  # keep the file reproducible
    (out_dir / "result.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_one(config: RunConfig, dataset, out_dir=None) -> RunResult:
    """Train one config; divergence is recorded in the result, not raised."""
    recorder = CosineRecorder()
    try:
        result = train(config, dataset, recorder)
    except TrainingDiverged as exc:
        result = RunResult(config, failed=True, error=str(exc))
    if out_dir is not None:
        write_run(out_dir, result, recorder)
    return result


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

_DATA_CACHE: dict[tuple, dict] = {}


def _data_key(config: RunConfig, base) -> tuple:
    return (
        config.dataset_dir,
        config.mnist_dir,
        config.plan,
        config.plan_seed,
        config.data_seed,
        config.train_pairs,
        config.val_pairs,
        config.samples_per_pair,
        str(base),
    )


def _sweep_job(args) -> RunResult:
    config, base, out_dir = args
    key = _data_key(config, base)
    try:
        if key not in _DATA_CACHE:
            _DATA_CACHE[key] = load_data(config, base)
        return run_one(config, _DATA_CACHE[key], out_dir)
    except Exception as exc:  # one bad run must not stop the sweep
        log.warning("run %s failed: %s", out_dir, exc)
        return RunResult(config, failed=True, error=f"{type(exc).__name__}: {exc}")


def run_name(index: int, config: RunConfig) -> str:
    return f"{index:03d}-{config.baseline}-f{config.filters}-b{config.batch_size}-lr{config.lr:g}-s{config.seed}"


def sweep_jobs(configs: Sequence[RunConfig], seeds: Sequence[int]) -> list[RunConfig]:
    """Every config crossed with every seed, sorted by (config index, seed)."""
    return [c.replace(seed=s) for c in configs for s in seeds]


def sweep(
    configs: Sequence[RunConfig],
    seeds: Sequence[int],
    out_dir=None,
    workers: int = 1,
    base: Path | None = None,
) -> list[RunResult]:
    """Run the grid; results come back in (config index, seed) order.

    Runs share nothing, so they can go to a process pool; each worker
    builds or loads the dataset once per distinct data config.
    """
    jobs = sweep_jobs(configs, seeds)
    if not jobs:
        raise ValueError("empty sweep grid")
    dirs = [None if out_dir is None else Path(out_dir) / run_name(i, c) for i, c in enumerate(jobs)]
    args = list(zip(jobs, [base] * len(jobs), dirs))
    if workers <= 1:
        return [_sweep_job(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_sweep_job, args))


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunPoint:
    name: str
    baseline: str
    filters: int
    batch_size: int
    lr: float
    seed: int
    first_epoch_sigma: float
    final_harmonic: float


ANALYSIS_HEADER = "run,baseline,filters,batch_size,lr,seed,first_epoch_sigma,final_harmonic_accuracy"


def load_point(run_dir) -> RunPoint | None:
    """The (first-epoch sigma, final harmonic accuracy) of a finished run.

    Returns None for failed or incomplete runs; those never enter statistics.
    """
    run_dir = Path(run_dir)
    result = json.loads((run_dir / "result.json").read_text(encoding="utf-8"))
    if result.get("failed"):
        return None
    cfg = parse_config(run_dir / "config.cfg")
    rows = [m for m in read_metrics_csv(run_dir / "metrics.csv") if m.split == "val"]
    recorder = CosineRecorder.load(run_dir / "cosines.csv")
    if not rows or not recorder.pairs():
        return None
    last = max(m.epoch for m in rows)
    acc = {m.task: m.accuracy for m in rows if m.epoch == last}
    return RunPoint(
        name=run_dir.name,
        baseline=cfg.baseline,
        filters=cfg.filters,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        seed=cfg.seed,
        first_epoch_sigma=recorder.first_epoch_sigma(recorder.pairs()[0]),
        final_harmonic=harmonic_mean_accuracy([acc[t] for t in TASKS]),
    )


def collect(runs_dir) -> list[RunPoint]:
    runs_dir = Path(runs_dir)
    if not runs_dir.is_dir():
        raise FileNotFoundError(f"{runs_dir}: not a directory")
    points = []
    for d in sorted(p for p in runs_dir.iterdir() if (p / "result.json").exists()):
        point = load_point(d)
        if point is not None:
            points.append(point)
    return points


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) < 3:
        raise ValueError(f"need at least 3 runs for a rank correlation, have {len(x)}")
    return float(stats.spearmanr(x, y).statistic)


def analysis_csv(points: Sequence[RunPoint]) -> str:
    lines = [ANALYSIS_HEADER]
    for p in points:
        lines.append(
            f"{p.name},{p.baseline},{p.filters},{p.batch_size},{p.lr:g},{p.seed},"
            f"{fmt_real(p.first_epoch_sigma)},{fmt_real(p.final_harmonic)}"
        )
    return "\n".join(lines) + "\n"


def analyze(runs_dir, out_path=None) -> tuple[list[RunPoint], float | None]:
    """Table of (first-epoch sigma, final accuracy) per run plus their Spearman rho."""
    points = collect(runs_dir)
    rho = spearman([p.first_epoch_sigma for p in points], [p.final_harmonic for p in points]) if len(points) >= 3 else None
    if out_path is not None:
        Path(out_path).write_text(analysis_csv(points), encoding="utf-8", newline="\n")
    return points, rho


def default_workers() -> int:
    return max(1, min(8, (os.cpu_count() or 1)))
