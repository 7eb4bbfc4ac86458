"""Layers, losses and initialisation built on :mod:`orthotask.autodiff`."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

SHARED = "shared"


def task_group(task_id: str) -> str:
    return f"task:{task_id}"


class Parameter(Tensor):
    """A trainable leaf with a dotted name and an immutable group."""

    __slots__ = ("_group",)

    def __init__(self, data, name: str, group: str = SHARED):
        super().__init__(data, requires_grad=True, name=name)
        self._group = group

    @property
    def group(self) -> str:
        return self._group

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape}, group={self.group})"


# ---------------------------------------------------------------------------
# Functional layers
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, F_in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = ad.matmul(x, ad.transpose(weight))
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias
    return out


def conv2d(x: Tensor, weight: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation of (N, C, H, W) with (K, C, kh, kw), no bias."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    n, _, h, w = x.shape
    k, c, kh, kw = weight.shape
    cols = ad.im2col(x, kh, kw, stride)
    ho, wo = ad.conv_output_size(h, kh, stride), ad.conv_output_size(w, kw, stride)
    out = ad.matmul(cols, ad.transpose(ad.reshape(weight, (k, c * kh * kw))))
    return ad.transpose(ad.reshape(out, (n, ho, wo, k)), (0, 3, 1, 2))


relu = ad.relu


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the exact identity outside training or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def init(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels))


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Normalise over every axis except the channel axis (axis 1).

    Training uses batch statistics and updates ``running`` in place (the
    running variance uses the unbiased estimate); evaluation is the fixed
    affine map defined by ``running``.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batchnorm: expected (N, C) or (N, C, H, W), got {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    g = ad.reshape(gamma, bshape)
    b = ad.reshape(beta, bshape)
    if training:
        if x.shape[0] < 2:
            raise ValueError("batchnorm: training mode needs a batch of at least 2")
        mu = ad.mean(x, axis=axes, keepdims=True)
        centred = x - mu
        var = ad.mean(centred * centred, axis=axes, keepdims=True)
        xhat = centred / ad.sqrt(var + eps)
        count = x.size // x.shape[1]
        running.mean = (1 - momentum) * running.mean + momentum * mu.data.reshape(-1)
        unbiased = var.data.reshape(-1) * count / (count - 1)
        running.var = (1 - momentum) * running.var + momentum * unbiased
    else:
        mu = running.mean.reshape(bshape)
        xhat = (x - mu) / np.sqrt(running.var.reshape(bshape) + eps)
    return xhat * g + b


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the labelled class, max-shifted."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)
    # constant shift: exact for the value and its derivatives
    shifted = logits - logits.data.max(axis=1, keepdims=True)
    lse = ad.log(ad.sum_(ad.exp(shifted), axis=1))
    picked = shifted[np.arange(n), labels]
    return ad.mean(lse - picked)


def mse(pred: Tensor, target) -> Tensor:
    target = ad._lift(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return ad.mean(diff * diff)


def kaiming_init(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    if fan_in <= 0:
        raise ValueError(f"kaiming_init: fan_in must be positive, got {fan_in}")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=tuple(shape))


# ---------------------------------------------------------------------------
# Layer objects
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerConfig:
    kind: str  # conv | linear | relu | dropout | batchnorm | flatten
    in_features: int = 0
    out_features: int = 0
    kernel: int = 3
    stride: int = 1
    bias: bool = False
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in {"conv", "linear", "relu", "dropout", "batchnorm", "flatten"}:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel <= 0 or self.stride <= 0:
            raise ValueError("kernel size and stride must be positive")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")


class Layer:
    def __init__(self, config: LayerConfig, name: str, group: str, rng: np.random.Generator):
        self.config = config
        self.name = name
        self.params: dict[str, Parameter] = {}
        self.running: RunningStats | None = None
        cfg = config
        if cfg.kind == "conv":
            fan_in = cfg.in_features * cfg.kernel * cfg.kernel
            shape = (cfg.out_features, cfg.in_features, cfg.kernel, cfg.kernel)
            self.params["weight"] = Parameter(kaiming_init(shape, fan_in, rng), f"{name}.weight", group)
        elif cfg.kind == "linear":
            shape = (cfg.out_features, cfg.in_features)
            self.params["weight"] = Parameter(kaiming_init(shape, cfg.in_features, rng), f"{name}.weight", group)
            if cfg.bias:
                self.params["bias"] = Parameter(np.zeros(cfg.out_features), f"{name}.bias", group)
        elif cfg.kind == "batchnorm":
            self.params["gamma"] = Parameter(np.ones(cfg.in_features), f"{name}.gamma", group)
            self.params["beta"] = Parameter(np.zeros(cfg.in_features), f"{name}.beta", group)
            self.running = RunningStats.init(cfg.in_features)

    def __call__(self, x: Tensor, training: bool, rng: np.random.Generator | None) -> Tensor:
        kind = self.config.kind
        if kind == "conv":
            return conv2d(x, self.params["weight"], self.config.stride)
        if kind == "linear":
            return linear(x, self.params["weight"], self.params.get("bias"))
        if kind == "relu":
            return relu(x)
        if kind == "dropout":
            return dropout(x, self.config.rate, training, rng)
        if kind == "batchnorm":
            return batchnorm(x, self.params["gamma"], self.params["beta"], self.running, training)
        return ad.reshape(x, (x.shape[0], -1))

    @property
    def weight(self) -> Parameter | None:
        return self.params.get("weight")


@dataclass
class Sequential:
    layers: list[Layer] = field(default_factory=list)

    def __call__(self, x: Tensor, training: bool, rng: np.random.Generator | None = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, training, rng)
        return x

    def parameters(self) -> Iterator[Parameter]:
        for layer in self.layers:
            yield from layer.params.values()

    def buffers(self) -> Iterator[tuple[str, RunningStats]]:
        for layer in self.layers:
            if layer.running is not None:
                yield layer.name, layer.running

    def weighted_layers(self) -> list[Layer]:
        return [layer for layer in self.layers if layer.weight is not None]


def build_stack(configs: list[LayerConfig], prefix: str, group: str, rng: np.random.Generator) -> Sequential:
    counts: dict[str, int] = {}
    layers = []
    for cfg in configs:
        idx = counts.get(cfg.kind, 0) + 1
        counts[cfg.kind] = idx
        layers.append(Layer(cfg, f"{prefix}.{cfg.kind}{idx}", group, rng))
    return Sequential(layers)
