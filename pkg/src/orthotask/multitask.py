"""Shared-encoder multi-task model and the gradient-cosine penalty.

The penalty pushes the per-task gradients of the shared parameters towards
mutual orthogonality.  For ``T`` tasks with unit-normalised gradients stacked
as the rows of ``U`` it is::

    alpha / (T (T - 1)) * || U U^T - I ||_F^2

which for two tasks reduces to ``alpha * cos^2``.  The normalised part (before
``alpha``) always lies in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ShapeError, Tensor

EPSILON_NORM = 1e-12


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    loss: str = "cross_entropy"  # or "mse"
    weight: float = 1.0
    arity: int = 5

    def __post_init__(self):
        if self.loss not in ("cross_entropy", "mse"):
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if not np.isfinite(self.weight):
            raise ValueError(f"task weight for {self.task_id} must be finite")


@dataclass(frozen=True)
class CosRegConfig:
    alpha: float = 0.0
    schedule: str = "constant"  # or "scaled": alpha times the detached mean task loss
    epsilon_norm: float = EPSILON_NORM
    differentiate_norm: bool = True

    def __post_init__(self):
        if not (self.alpha >= 0 and np.isfinite(self.alpha)):
            raise ValueError(f"alpha must be a finite value >= 0, got {self.alpha}")
        if self.schedule not in ("constant", "scaled"):
            raise ValueError(f"unknown alpha schedule {self.schedule!r}")
        if not self.epsilon_norm > 0:
            raise ValueError("epsilon_norm must be positive")


@dataclass
class Batch:
    x: np.ndarray
    labels: dict[str, np.ndarray]

    def __len__(self):
        return len(self.x)


class MultiTaskModel:
    """A shared encoder feeding one decoder per task.

    ``regularization_target`` defaults to the weight of the last weighted
    encoder layer; pass ``target="encoder"`` to use every shared weight.
    """

    def __init__(
        self,
        encoder: nn.Sequential,
        decoders: Mapping[str, nn.Sequential],
        target: str | Sequence[nn.Parameter] = "last",
    ):
        self.encoder = encoder
        self.decoders = dict(decoders)
        if isinstance(target, str):
            weighted = encoder.weighted_layers()
            if not weighted:
                raise ValueError("encoder has no weighted layer to regularise")
            if target == "last":
                target = [weighted[-1].weight]
            elif target == "encoder":
                target = [layer.weight for layer in weighted]
            else:
                raise ValueError(f"unknown regularization target {target!r}")
        self.regularization_target = list(target)
        self._check()

    def _check(self):
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ValueError("parameter names must be unique")
        shared = {p.id for p in self.shared_parameters()}
        if not self.regularization_target:
            raise ValueError("regularization target must be non-empty")
        for p in self.regularization_target:
            if p.id not in shared:
                raise ValueError(f"regularization target {p.name} is not a shared parameter")
        for p in self.encoder.parameters():
            if p.group != nn.SHARED:
                raise ValueError(f"encoder parameter {p.name} is not in the shared group")
        for t, dec in self.decoders.items():
            for p in dec.parameters():
                if p.group != nn.task_group(t):
                    raise ValueError(f"decoder parameter {p.name} is not in group {nn.task_group(t)}")

    @property
    def task_ids(self) -> list[str]:
        return list(self.decoders)

    def parameters(self) -> Iterator[nn.Parameter]:
        yield from self.encoder.parameters()
        for dec in self.decoders.values():
            yield from dec.parameters()

    def shared_parameters(self) -> list[nn.Parameter]:
        return list(self.encoder.parameters())

    def task_parameters(self, task_id: str) -> list[nn.Parameter]:
        return list(self.decoders[task_id].parameters())

    def buffers(self) -> Iterator[tuple[str, nn.RunningStats]]:
        yield from self.encoder.buffers()
        for dec in self.decoders.values():
            yield from dec.buffers()

    def forward(self, x, training: bool = True, rng: np.random.Generator | None = None) -> dict[str, Tensor]:
        features = self.encoder(ad._lift(x), training, rng)
        return {t: dec(features, training, rng) for t, dec in self.decoders.items()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def build_cnn(
    filters: int = 20,
    hidden: int = 128,
    tasks: Sequence[str] = ("left", "right"),
    classes: int = 5,
    image_size: int = 64,
    in_channels: int = 1,
    batchnorm: bool = False,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    target: str = "last",
) -> MultiTaskModel:
    """Two-conv shared encoder; each decoder is conv, FC hidden, FC out.

    All convolutions are 3x3, stride 2, bias-free, no padding.  Batchnorm (if
    on) sits between each convolution and its ReLU; dropout (if non-zero)
    follows encoder activations and the decoder's hidden FC layer.
    """
    rng = rng if rng is not None else np.random.default_rng(0)

    def conv_block(c_in: int) -> list[nn.LayerConfig]:
        block = [nn.LayerConfig("conv", c_in, filters, kernel=3, stride=2)]
        if batchnorm:
            block.append(nn.LayerConfig("batchnorm", filters))
        block.append(nn.LayerConfig("relu"))
        return block

    enc_cfg = conv_block(in_channels)
    if dropout:
        enc_cfg.append(nn.LayerConfig("dropout", rate=dropout))
    enc_cfg += conv_block(filters)
    if dropout:
        enc_cfg.append(nn.LayerConfig("dropout", rate=dropout))
    side = image_size
    for _ in range(3):
        side = ad.conv_output_size(side, 3, 2)
    if side < 1:
        raise ValueError(f"image size {image_size} too small for three stride-2 3x3 convolutions")
    encoder = nn.build_stack(enc_cfg, "encoder", nn.SHARED, rng)

    decoders = {}
    for t in tasks:
        dec_cfg = conv_block(filters) + [
            nn.LayerConfig("flatten"),
            nn.LayerConfig("linear", filters * side * side, hidden, bias=True),
            nn.LayerConfig("relu"),
        ]
        if dropout:
            dec_cfg.append(nn.LayerConfig("dropout", rate=dropout))
        dec_cfg.append(nn.LayerConfig("linear", hidden, classes, bias=True))
        decoders[t] = nn.build_stack(dec_cfg, f"decoder.{t}", nn.task_group(t), rng)
    return MultiTaskModel(encoder, decoders, target=target)


def build_mlp(
    in_features: int,
    shared: Sequence[int],
    heads: Mapping[str, Sequence[int]],
    rng: np.random.Generator,
    target: str = "last",
) -> MultiTaskModel:
    """Fully connected variant used for toy problems and gradient checks."""
    cfg = []
    width = in_features
    for i, out in enumerate(shared):
        cfg.append(nn.LayerConfig("linear", width, out, bias=True))
        cfg.append(nn.LayerConfig("relu"))
        width = out
    encoder = nn.build_stack(cfg, "encoder", nn.SHARED, rng)
    decoders = {}
    for t, sizes in heads.items():
        dcfg = []
        w = width
        for i, out in enumerate(sizes):
            dcfg.append(nn.LayerConfig("linear", w, out, bias=True))
            if i < len(sizes) - 1:
                dcfg.append(nn.LayerConfig("relu"))
            w = out
        decoders[t] = nn.build_stack(dcfg, f"decoder.{t}", nn.task_group(t), rng)
    return MultiTaskModel(encoder, decoders, target=target)


# ---------------------------------------------------------------------------
# Losses and gradients
# ---------------------------------------------------------------------------


def task_loss(spec: TaskSpec, output: Tensor, labels) -> Tensor:
    if spec.loss == "cross_entropy":
        return nn.cross_entropy(output, labels)
    return nn.mse(output, np.asarray(labels, dtype=np.float64).reshape(output.shape))


def joint_loss(
    model: MultiTaskModel,
    batch: Batch,
    task_specs: Sequence[TaskSpec],
    training: bool = True,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Weighted sum of per-task mean losses, plus the individual losses."""
    total, losses, _ = _joint(model, batch, task_specs, training, rng)
    return total, losses


def _joint(model, batch, task_specs, training, rng):
    for spec in task_specs:
        if spec.task_id not in batch.labels:
            raise KeyError(f"batch has no labels for task {spec.task_id!r}")
        if spec.task_id not in model.decoders:
            raise KeyError(f"model has no decoder for task {spec.task_id!r}")
    outputs = model.forward(batch.x, training=training, rng=rng)
    losses = {s.task_id: task_loss(s, outputs[s.task_id], batch.labels[s.task_id]) for s in task_specs}
    total = None
    for spec in task_specs:
        term = losses[spec.task_id] * spec.weight
        total = term if total is None else total + term
    return total, losses, outputs


def task_gradients(
    model: MultiTaskModel, per_task_losses: Mapping[str, Tensor], create_graph: bool = False
) -> dict[str, Tensor]:
    """Flattened gradient of each task loss w.r.t. the regularisation target."""
    target = model.regularization_target
    out = {}
    for t, loss in per_task_losses.items():
        grads = ad.backward(loss, target, create_graph=create_graph)
        flat = [ad.reshape(g, (-1,)) for g in grads]
        out[t] = flat[0] if len(flat) == 1 else ad.concat(flat)
    return out


def _as_vector(g) -> Tensor:
    g = ad._lift(g)
    if g.ndim != 1:
        g = ad.reshape(g, (-1,))
    return g


def _norm(g: Tensor, eps: float, differentiable: bool = True) -> Tensor:
    # max(||g||, eps) written as sqrt(max(||g||^2, eps^2)) keeps sqrt' finite
    sq = ad.clamp(ad.sum_(g * g), lo=eps * eps)
    n = ad.sqrt(sq)
    return n if differentiable else n.detach()


def cosine(g_i, g_j, epsilon_norm: float = EPSILON_NORM, differentiate_norm: bool = True) -> Tensor:
    """Cosine of two vectors with safe normalisation, clamped to [-1, 1]."""
    g_i, g_j = _as_vector(g_i), _as_vector(g_j)
    if g_i.shape != g_j.shape:
        raise ShapeError(f"cosine: length mismatch {g_i.shape} vs {g_j.shape}")
    dot = ad.sum_(g_i * g_j)
    denom = _norm(g_i, epsilon_norm, differentiate_norm) * _norm(g_j, epsilon_norm, differentiate_norm)
    return ad.clamp(dot / denom, -1.0, 1.0)


def cosine_value(g_i: np.ndarray, g_j: np.ndarray, epsilon_norm: float = EPSILON_NORM) -> float:
    """Plain-float cosine for detached gradients (instrumentation)."""
    g_i = np.asarray(g_i, dtype=np.float64).reshape(-1)
    g_j = np.asarray(g_j, dtype=np.float64).reshape(-1)
    if g_i.shape != g_j.shape:
        raise ShapeError(f"cosine: length mismatch {g_i.shape} vs {g_j.shape}")
    ni = max(float(np.sqrt(g_i @ g_i)), epsilon_norm)
    nj = max(float(np.sqrt(g_j @ g_j)), epsilon_norm)
    return float(np.clip((g_i @ g_j) / (ni * nj), -1.0, 1.0))


def cosreg_pairwise(g_i, g_j, alpha: float, epsilon_norm: float = EPSILON_NORM, differentiate_norm: bool = True) -> Tensor:
    c = cosine(g_i, g_j, epsilon_norm, differentiate_norm)
    return c * c * alpha


def normalized_penalty(
    gradients: Sequence, epsilon_norm: float = EPSILON_NORM, differentiate_norm: bool = True
) -> Tensor:
    """``||U U^T - I||_F^2 / (T (T - 1))`` for unit-normalised gradient rows ``U``.

    The diagonal is masked instead of subtracted, which is the same thing for
    unit rows and keeps the value exactly in [0, 1] under rounding.
    """
    gradients = [_as_vector(g) for g in gradients]
    t = len(gradients)
    if t < 2:
        raise ValueError(f"penalty needs at least 2 task gradients, got {t}")
    if len({g.shape for g in gradients}) != 1:
        raise ShapeError(f"penalty: gradient lengths differ: {[g.shape for g in gradients]}")
    units = [g / _norm(g, epsilon_norm, differentiate_norm) for g in gradients]
    u = ad.concat([ad.reshape(v, (1, -1)) for v in units], axis=0)
    gram = ad.clamp(ad.matmul(u, ad.transpose(u)), -1.0, 1.0)
    off = gram * (1.0 - np.eye(t))
    return ad.sum_(off * off) * (1.0 / (t * (t - 1)))


def cosreg_general(
    gradients: Sequence, alpha: float, epsilon_norm: float = EPSILON_NORM, differentiate_norm: bool = True
) -> Tensor:
    return normalized_penalty(gradients, epsilon_norm, differentiate_norm) * alpha


def effective_alpha(config: CosRegConfig, per_task_losses: Sequence) -> float:
    """Penalty weight for this step; the scaled schedule uses detached losses."""
    if config.schedule == "constant":
        return float(config.alpha)
    values = [float(l.data) if isinstance(l, Tensor) else float(l) for l in per_task_losses]
    if not values:
        return 0.0
    return float(config.alpha) * float(np.mean(values))


@dataclass
class Objective:
    total: Tensor
    joint: Tensor
    losses: dict[str, Tensor]
    penalty: float | None = None  # normalised, before alpha
    alpha: float = 0.0
    gradients: dict[str, np.ndarray] = field(default_factory=dict)
    outputs: dict[str, Tensor] = field(default_factory=dict)

    def cosines(self, epsilon_norm: float = EPSILON_NORM) -> dict[tuple[str, str], float]:
        ids = list(self.gradients)
        return {
            (a, b): cosine_value(self.gradients[a], self.gradients[b], epsilon_norm)
            for i, a in enumerate(ids)
            for b in ids[i + 1 :]
        }


def compute_objective(
    model: MultiTaskModel,
    batch: Batch,
    task_specs: Sequence[TaskSpec],
    config: CosRegConfig | None = None,
    training: bool = True,
    rng: np.random.Generator | None = None,
    need_gradients: bool = False,
) -> Objective:
    """Joint loss plus penalty, with the pieces the training loop reports.

    When the effective penalty weight is 0 the penalty never enters the
    graph, so that run is indistinguishable from an unregularised one.
    ``need_gradients`` requests detached task gradients for instrumentation
    even when no penalty is applied.
    """
    joint, losses, outputs = _joint(model, batch, task_specs, training, rng)
    obj = Objective(total=joint, joint=joint, losses=losses, outputs=outputs)
    alpha = effective_alpha(config, list(losses.values())) if config is not None else 0.0
    obj.alpha = alpha
    if alpha > 0:
        grads = task_gradients(model, losses, create_graph=True)
        pen = normalized_penalty(list(grads.values()), config.epsilon_norm, config.differentiate_norm)
        obj.total = joint + pen * alpha
        obj.penalty = float(pen.data)
        obj.gradients = {t: g.data for t, g in grads.items()}
    elif need_gradients:
        grads = task_gradients(model, losses, create_graph=False)
        obj.gradients = {t: g.data for t, g in grads.items()}
        if len(grads) >= 2:
            eps = config.epsilon_norm if config is not None else EPSILON_NORM
            with ad.no_grad():
                obj.penalty = float(normalized_penalty(list(grads.values()), eps).data)
    return obj


def regularized_loss(
    model: MultiTaskModel,
    batch: Batch,
    task_specs: Sequence[TaskSpec],
    config: CosRegConfig,
    training: bool = True,
    rng: np.random.Generator | None = None,
) -> Tensor:
    return compute_objective(model, batch, task_specs, config, training=training, rng=rng).total
