"""Optimisers, the training loop, evaluation and checkpoints."""

from __future__ import annotations

import logging
import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import multitask as mt
from .config import RunConfig
from .data import MultiDigitSet
from .instrument import CosineRecorder

log = logging.getLogger(__name__)

TASKS = ("left", "right")
TASK_SPECS = tuple(mt.TaskSpec(t, "cross_entropy", 1.0, 5) for t in TASKS)


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------


def _check_aligned(params, grads):
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ad.ShapeError(f"gradient shape {np.shape(g)} does not match parameter {p.name} {p.shape}")


def _array(g) -> np.ndarray:
    return g.data if isinstance(g, ad.Tensor) else np.asarray(g, dtype=np.float64)


def sgd_step(params: Sequence[ad.Tensor], grads: Sequence, lr: float) -> None:
    """Plain gradient descent: ``theta <- theta - lr * g``."""
    _check_aligned(params, grads)
    for p, g in zip(params, grads):
        p.data = p.data - lr * _array(g)


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Sequence[ad.Tensor], kind: str = "adam", lr: float = 1e-3) -> "OptimizerState":
        state = cls(kind=kind, lr=lr)
        if kind == "adam":
            for p in params:
                state.m[p.name] = np.zeros(p.shape)
                state.v[p.name] = np.zeros(p.shape)
        elif kind != "sgd":
            raise ValueError(f"unknown optimizer {kind!r}")
        return state


def adam_step(state: OptimizerState, params: Sequence[ad.Tensor], grads: Sequence) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    _check_aligned(params, grads)
    for p in params:
        if p.name not in state.m or state.m[p.name].shape != p.shape:
            raise ad.ShapeError(f"optimizer state does not match parameter {p.name} {p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g in zip(params, grads):
        g = _array(g)
        m = b1 * state.m[p.name] + (1.0 - b1) * g
        v = b2 * state.v[p.name] + (1.0 - b2) * (g * g)
        state.m[p.name] = m
        state.v[p.name] = v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def optimizer_step(state: OptimizerState, params, grads) -> None:
    if state.kind == "adam":
        adam_step(state, params, grads)
    else:
        sgd_step(params, grads, state.lr)
        state.step += 1


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def harmonic_mean_accuracy(accs: Sequence[float]) -> float:
    """``n / sum(1 / a)``; any zero accuracy gives 0."""
    accs = [float(a) for a in accs]
    if not accs:
        raise ValueError("harmonic mean of no accuracies")
    if any(a <= 0 for a in accs):
        return 0.0
    return len(accs) / sum(1.0 / a for a in accs)


@dataclass(frozen=True)
class EpochMetric:
    epoch: int
    task: str
    split: str
    loss: float
    accuracy: float


METRICS_HEADER = "epoch,task,split,loss,accuracy"


def metrics_csv(rows: Sequence[EpochMetric]) -> str:
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(f"{r.epoch},{r.task},{r.split},{r.loss:.17g},{r.accuracy:.17g}")
    return "\n".join(lines) + "\n"


def read_metrics_csv(path) -> list[EpochMetric]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise ValueError(f"{path}: not a metrics file")
    out = []
    for line in lines[1:]:
        e, t, s, l, a = line.split(",")
        out.append(EpochMetric(int(e), t, s, float(l), float(a)))
    return out


@dataclass
class RunResult:
    config: RunConfig
    metrics: list[EpochMetric] = field(default_factory=list)
    final_harmonic: float | None = None
    first_epoch_sigma: dict[str, float] = field(default_factory=dict)
    penalties: list[float] = field(default_factory=list)
    steps: int = 0
    wall_time: float = 0.0
    failed: bool = False
    error: str | None = None

    def accuracy(self, split: str, epoch: int | None = None) -> dict[str, float]:
        rows = [m for m in self.metrics if m.split == split]
        if not rows:
            return {}
        epoch = max(m.epoch for m in rows) if epoch is None else epoch
        return {m.task: m.accuracy for m in rows if m.epoch == epoch}

    def summary(self) -> dict:
        return {
            "baseline": self.config.baseline,
            "filters": self.config.filters,
            "batch_size": self.config.batch_size,
            "lr": self.config.lr,
            "alpha": self.config.alpha,
            "seed": self.config.seed,
            "steps": self.steps,
            "final_harmonic_accuracy": self.final_harmonic,
            "first_epoch_sigma": self.first_epoch_sigma,
            "wall_time": self.wall_time,
            "failed": self.failed,
            "error": self.error,
        }


# ---------------------------------------------------------------------------
# Model construction and evaluation
# ---------------------------------------------------------------------------


def make_model(config: RunConfig) -> mt.MultiTaskModel:
    rng = np.random.default_rng([config.seed, 0])
    return mt.build_cnn(
        filters=config.filters,
        hidden=config.hidden,
        tasks=TASKS,
        classes=5,
        batchnorm=config.uses_batchnorm,
        dropout=config.dropout_rate if config.uses_dropout else 0.0,
        rng=rng,
        target=config.target,
    )


def cosreg_config(config: RunConfig) -> mt.CosRegConfig | None:
    if not config.uses_cosreg:
        return None
    return mt.CosRegConfig(
        alpha=config.alpha,
        schedule=config.schedule,
        epsilon_norm=config.epsilon_norm,
        differentiate_norm=config.differentiate_norm,
    )


def to_batch(ds: MultiDigitSet, index) -> mt.Batch:
    return mt.Batch(ds.images_at(index), {"left": ds.label_left[index], "right": ds.label_right[index]})


def evaluate(model: mt.MultiTaskModel, ds: MultiDigitSet, batch_size: int = 250) -> dict[str, tuple[float, float]]:
    """Per-task (mean loss, accuracy) in evaluation mode; touches no state."""
    totals = {t: [0.0, 0] for t in model.task_ids}
    n = len(ds)
    with ad.no_grad():
        for lo in range(0, n, batch_size):
            idx = slice(lo, min(lo + batch_size, n))
            batch = to_batch(ds, idx)
            outputs = model.forward(batch.x, training=False)
            for spec in TASK_SPECS:
                out = outputs[spec.task_id]
                labels = batch.labels[spec.task_id]
                loss = mt.task_loss(spec, out, labels)
                totals[spec.task_id][0] += float(loss.data) * len(labels)
                totals[spec.task_id][1] += int((out.data.argmax(axis=1) == labels).sum())
    return {t: (s / n, c / n) for t, (s, c) in totals.items()}


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, 7, epoch]).permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # batchnorm cannot train on a single sample
    return [b for b in batches if len(b) >= 2]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


class Trainer:
    """One training run; owns its model, optimizer state and step counter.

    All randomness is derived from ``config.seed`` and the step or epoch
    index, so a run restored from a checkpoint continues exactly as an
    uninterrupted one would.
    """

    def __init__(self, config: RunConfig, dataset: Mapping[str, MultiDigitSet], recorder: CosineRecorder | None = None):
        self.config = config
        self.train_set = dataset["train"]
        self.val_set = dataset.get("val")
        self.recorder = recorder
        self.model = make_model(config)
        self.params = list(self.model.parameters())
        self.optimizer = OptimizerState.for_params(self.params, config.optimizer, config.lr)
        self.cosreg = cosreg_config(config)
        self.step = 0
        self.result = RunResult(config)
        self._epoch_stats: dict[str, list[float]] = {}

    @property
    def steps_per_epoch(self) -> int:
        return len(epoch_batches(len(self.train_set), self.config.batch_size, self.config.seed, 0))

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.config.epochs

    def train_step(self, batch: mt.Batch, epoch: int) -> mt.Objective:
        rng = np.random.default_rng([self.config.seed, 11, self.step])
        graph = ad.Graph()
        try:
            with graph:
                obj = mt.compute_objective(
                    self.model,
                    batch,
                    TASK_SPECS,
                    self.cosreg,
                    training=True,
                    rng=rng,
                    need_gradients=self.recorder is not None,
                )
                total = float(obj.total.data)
                if not math.isfinite(total):
                    raise TrainingDiverged(f"non-finite loss {total} at step {self.step}")
                grads = ad.backward(obj.total, self.params)
                optimizer_step(self.optimizer, self.params, grads)
            if self.recorder is not None:
                self.recorder.record(self.step, epoch, obj.cosines(self.config.epsilon_norm))
        finally:
            graph.release()
        if obj.penalty is not None and obj.alpha > 0:
            self.result.penalties.append(obj.penalty * obj.alpha)
        self.step += 1
        return obj

    def run(self, until_step: int | None = None) -> RunResult:
        """Train up to ``until_step`` (default: all epochs) and return the result."""
        start = time.perf_counter()
        spe = self.steps_per_epoch
        stop = self.total_steps if until_step is None else min(until_step, self.total_steps)
        try:
            while self.step < stop:
                epoch, pos = divmod(self.step, spe)
                batches = epoch_batches(len(self.train_set), self.config.batch_size, self.config.seed, epoch)
                idx = batches[pos]
                batch = to_batch(self.train_set, idx)
                obj = self.train_step(batch, epoch)
                self._accumulate(obj, batch)
                if pos == spe - 1:
                    self._end_epoch(epoch)
        except TrainingDiverged as exc:
            self.result.failed = True
            self.result.error = str(exc)
            log.warning("run failed: %s", exc)
            raise
        finally:
            self.result.steps = self.step
            self.result.wall_time += time.perf_counter() - start
        self._finish()
        return self.result

    def _accumulate(self, obj: mt.Objective, batch: mt.Batch) -> None:
        n = len(batch)
        for t, loss in obj.losses.items():
            s = self._epoch_stats.setdefault(t, [0.0, 0.0, 0.0])
            s[0] += float(loss.data) * n
            s[1] += float((obj.outputs[t].data.argmax(axis=1) == batch.labels[t]).sum())
            s[2] += n

    def _end_epoch(self, epoch: int) -> None:
        for t in TASKS:
            loss_sum, correct, count = self._epoch_stats.get(t, [0.0, 0.0, 0.0])
            if count:
                self.result.metrics.append(EpochMetric(epoch, t, "train", loss_sum / count, correct / count))
        self._epoch_stats = {}
        if self.val_set is not None and len(self.val_set):
            for t, (loss, acc) in evaluate(self.model, self.val_set).items():
                self.result.metrics.append(EpochMetric(epoch, t, "val", loss, acc))

    def _finish(self) -> None:
        val = self.result.accuracy("val")
        if val:
            self.result.final_harmonic = harmonic_mean_accuracy([val[t] for t in TASKS])
        if self.recorder is not None:
            for pair in self.recorder.pairs():
                try:
                    self.result.first_epoch_sigma["|".join(pair)] = self.recorder.first_epoch_sigma(pair)
                except ValueError:
                    pass

    # -- checkpoints ------------------------------------------------------
    def save(self, path) -> None:
        extra = {"trainer:step": np.array(float(self.step))}
        for t, stats in self._epoch_stats.items():
            extra[f"trainer:epoch_stats:{t}"] = np.array(stats)
        save_checkpoint(self.model, self.optimizer, path, extra=extra)

    def restore(self, path) -> None:
        arrays = load_checkpoint(path, self.model, self.optimizer)
        self.step = int(arrays["trainer:step"])
        prefix = "trainer:epoch_stats:"
        self._epoch_stats = {k[len(prefix) :]: list(map(float, v)) for k, v in arrays.items() if k.startswith(prefix)}


def train(config: RunConfig, dataset: Mapping[str, MultiDigitSet], recorder: CosineRecorder | None = None) -> RunResult:
    return Trainer(config, dataset, recorder).run()


# ---------------------------------------------------------------------------
# Checkpoint files
#
#   b"GORT" | version u32 | count u32 | count x tensor | crc32 u32
#   tensor: name_len u32 | name utf-8 | ndim u32 | dims u32... | float64 LE payload
# All integers little-endian; the CRC covers every preceding byte.
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"GORT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads version {CKPT_VERSION}")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    (count,) = struct.unpack("<I", body[8:12])
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - pos} trailing bytes")
    return out


def save_checkpoint(model: mt.MultiTaskModel, state: OptimizerState, path, extra: Mapping[str, np.ndarray] | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for p in model.parameters():
        tensors[f"param:{p.name}"] = p.data
    for name, stats in model.buffers():
        tensors[f"buffer:{name}.mean"] = stats.mean
        tensors[f"buffer:{name}.var"] = stats.var
    tensors["optim:step"] = np.array(float(state.step))
    tensors["optim:lr"] = np.array(state.lr)
    for name in state.m:
        tensors[f"optim:m:{name}"] = state.m[name]
        tensors[f"optim:v:{name}"] = state.v[name]
    for k, v in (extra or {}).items():
        tensors[k] = np.array(v, dtype=np.float64)
    write_tensors(path, tensors)


def load_checkpoint(path, model: mt.MultiTaskModel | None = None, state: OptimizerState | None = None) -> dict[str, np.ndarray]:
    """Read a checkpoint; if ``model``/``state`` are given, restore them in place."""
    arrays = read_tensors(path)
    if model is not None:
        for p in model.parameters():
            key = f"param:{p.name}"
            if key not in arrays or arrays[key].shape != p.shape:
                raise CheckpointError(f"{path}: missing or mis-shaped {key}")
            p.data = arrays[key].copy()
        for name, stats in model.buffers():
            stats.mean = arrays[f"buffer:{name}.mean"].copy()
            stats.var = arrays[f"buffer:{name}.var"].copy()
    if state is not None:
        state.step = int(arrays["optim:step"])
        state.lr = float(arrays["optim:lr"])
        for name in list(state.m):
            state.m[name] = arrays[f"optim:m:{name}"].copy()
            state.v[name] = arrays[f"optim:v:{name}"].copy()
    return arrays
