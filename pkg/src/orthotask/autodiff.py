"""Reverse-mode automatic differentiation on a dynamic graph.

Every primitive records a vector-Jacobian rule that is itself written in terms
of primitives.  Running ``backward(..., create_graph=True)`` therefore yields
gradients that are ordinary graph nodes, and those can be differentiated
again.  This is what the gradient-cosine penalty needs: the penalty is a
function of task gradients, so its own gradient is a second derivative.

All values are float64 numpy arrays.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "DomainError",
    "GradientError",
    "tensor",
    "constant",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "backward",
    "finite_difference_gradient",
    "forward_primitive",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class DomainError(ValueError):
    """A primitive was evaluated outside its mathematical domain."""


class GradientError(RuntimeError):
    """Raised by :func:`backward` for a malformed differentiation request."""


_ids = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.grad_enabled = enabled
    try:
        yield
    finally:
        _state.grad_enabled = prev


def no_grad():
    """Context manager: operations inside produce constants."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Graph:
    """Append-only record of the nodes created while the graph is active.

    Use as a context manager. Node ids grow monotonically, so insertion order
    is a topological order.  Graphs are thread-confined: each thread has its
    own stack of active graphs.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        stack = getattr(_state, "graphs", None)
        if stack is None:
            stack = _state.graphs = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.graphs.pop()
        return False

    def release(self) -> None:
        """Cut every recorded node off from its parents and backward closure.

        Backward closures often capture their own output, so a finished graph
        is full of reference cycles that only the cyclic collector would free.
        Values (``.data``) stay readable. Nodes can no longer be differentiated.
        """
        for node in self.nodes:
            node.parents = ()
            node._vjp = None
        self.nodes = []


def _record(node: "Tensor") -> None:
    stack = getattr(_state, "graphs", None)
    if stack:
        stack[-1].nodes.append(node)


class Tensor:
    """A node of the computation graph holding a float64 array value."""

    __array_priority__ = 100.0
    __slots__ = ("data", "requires_grad", "op", "parents", "_vjp", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.id = next(_ids)
        self.name = name
        _record(self)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(op={self.op}, shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, negate(_lift(other)))

    def __rsub__(self, other):
        return add(other, negate(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = parents
        out._vjp = vjp
    else:
        out.op = op
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Primitives.  Each vjp returns one entry per parent (None when not needed).
# ---------------------------------------------------------------------------


def sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce ``g`` over broadcast axes so that it has ``shape``."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    r = sum_(g, axis=axes, keepdims=True) if axes else g
    return reshape(r, shape)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return (
            sum_to(g, a.shape) if a.requires_grad else None,
            sum_to(g, b.shape) if b.requires_grad else None,
        )

    return _make("add", a.data + b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        return (
            sum_to(mul(g, b), a.shape) if a.requires_grad else None,
            sum_to(mul(g, a), b.shape) if b.requires_grad else None,
        )

    return _make("mul", a.data * b.data, (a, b), vjp)


def divide(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("divide", a, b)
    if np.any(b.data == 0):
        raise DomainError("divide: division by zero")
    out_ref: list[Tensor] = []

    def vjp(g):
        out = out_ref[0]
        return (
            sum_to(divide(g, b), a.shape) if a.requires_grad else None,
            sum_to(negate(divide(mul(g, out), b)), b.shape) if b.requires_grad else None,
        )

    out = _make("divide", a.data / b.data, (a, b), vjp)
    out_ref.append(out)
    return out


def negate(a) -> Tensor:
    a = _lift(a)
    return _make("negate", -a.data, (a,), lambda g: (negate(g),))


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        return (
            matmul(g, transpose(b)) if a.requires_grad else None,
            matmul(transpose(a), g) if b.requires_grad else None,
        )

    return _make("matmul", a.data @ b.data, (a, b), vjp)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _make("reshape", data, (a,), lambda g: (reshape(g, a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (transpose(g, inverse),))


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return _make("broadcast", data, (a,), lambda g: (sum_to(g, a.shape),))


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _kept_shape(shape, axes) -> tuple[int, ...]:
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    kept = _kept_shape(a.shape, axes)

    def vjp(g):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _make("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    kept = _kept_shape(a.shape, axes)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1

    def vjp(g):
        return (broadcast_to(reshape(mul(g, 1.0 / count), kept), a.shape),)

    return _make("mean", a.data.mean(axis=axes, keepdims=keepdims), (a,), vjp)


def _scatter(g: Tensor, shape: tuple[int, ...], index) -> Tensor:
    """Adjoint of slicing: place ``g`` into zeros of ``shape`` at ``index``."""
    out = np.zeros(shape)
    np.add.at(out, index, g.data)
    return _make("unslice", out, (g,), lambda gg: (slice_(gg, index),))


def slice_(a, index) -> Tensor:
    a = _lift(a)
    try:
        data = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} (shape {a.shape})") from None
    return _make("slice", np.array(data, dtype=np.float64), (a,), lambda g: (_scatter(g, a.shape, index),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(_lift(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}") from None
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            index = [slice(None)] * g.ndim
            index[ax] = slice(int(lo), int(hi))
            out.append(slice_(g, tuple(index)))
        return tuple(out)

    return _make("concat", data, tensors, vjp)


def relu(a) -> Tensor:
    a = _lift(a)
    mask = (a.data > 0).astype(np.float64)
    return _make("relu", a.data * mask, (a,), lambda g: (mul(g, mask),))


def exp(a) -> Tensor:
    a = _lift(a)
    out_ref: list[Tensor] = []
    out = _make("exp", np.exp(a.data), (a,), lambda g: (mul(g, out_ref[0]),))
    out_ref.append(out)
    return out


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log: non-positive input (min {a.data.min():.6g})")
    return _make("log", np.log(a.data), (a,), lambda g: (divide(g, a),))


def sqrt(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data < 0):
        raise DomainError(f"sqrt: negative input (min {a.data.min():.6g})")
    out_ref: list[Tensor] = []

    def vjp(g):
        out = out_ref[0]
        if np.any(out.data == 0):
            raise DomainError("sqrt: derivative undefined at 0")
        return (divide(mul(g, 0.5), out),)

    out = _make("sqrt", np.sqrt(a.data), (a,), vjp)
    out_ref.append(out)
    return out


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Elementwise clip; the derivative is 1 inside the interval, 0 outside."""
    a = _lift(a)
    data = np.clip(a.data, lo, hi)
    mask = (data == a.data).astype(np.float64)
    return _make("clamp", data, (a,), lambda g: (mul(g, mask),))


def _window_view(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, kh, kw)


def conv_output_size(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


def im2col(x, kh: int, kw: int, stride: int) -> Tensor:
    """Lower (N, C, H, W) into patch rows of shape (N*Ho*Wo, C*kh*kw)."""
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col: expected (N, C, H, W), got {x.shape}")
    if stride <= 0:
        raise ShapeError(f"im2col: stride must be positive, got {stride}")
    n, c, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"im2col: kernel ({kh}, {kw}) larger than input ({h}, {w})")
    ho, wo = conv_output_size(h, kh, stride), conv_output_size(w, kw, stride)
    cols = _window_view(x.data, kh, kw, stride).transpose(0, 2, 3, 1, 4, 5)
    data = cols.reshape(n * ho * wo, c * kh * kw)
    return _make("im2col", data, (x,), lambda g: (col2im(g, x.shape, kh, kw, stride),))


def col2im(cols, x_shape, kh: int, kw: int, stride: int) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add patch rows back into an image."""
    cols = _lift(cols)
    n, c, h, w = x_shape
    ho, wo = conv_output_size(h, kh, stride), conv_output_size(w, kw, stride)
    if cols.shape != (n * ho * wo, c * kh * kw):
        raise ShapeError(f"col2im: got {cols.shape}, expected {(n * ho * wo, c * kh * kw)}")
    g = np.ascontiguousarray(cols.data.reshape(n, ho, wo, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
    out = np.zeros((n, c, h, w))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += g[i, j]
    return _make("col2im", out, (cols,), lambda gg: (im2col(gg, kh, kw, stride),))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "reshape": reshape,
    "slice": slice_,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "sum": sum_,
    "mean": mean,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "divide": divide,
    "negate": negate,
    "transpose": transpose,
    "broadcast": broadcast_to,
    "clamp": clamp,
    "im2col": im2col,
    "col2im": col2im,
}


def forward_primitive(op: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply primitive ``op`` by tag, e.g. ``forward_primitive("matmul", [a, b])``."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------


def _ancestors(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen or not node.requires_grad:
            continue
        seen[node.id] = node
        stack.extend(node.parents)
    return sorted(seen.values(), key=lambda t: t.id, reverse=True)


def backward(root: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``root`` with respect to each node in ``wrt``.

    With ``create_graph=True`` the returned gradients are differentiable graph
    nodes; otherwise they are constants.  A ``wrt`` node that ``root`` does not
    depend on raises :class:`GradientError`.
    """
    if root.size != 1:
        raise GradientError(f"backward: root must be scalar, got shape {root.shape}")
    wrt = list(wrt)
    for w in wrt:
        if not w.requires_grad:
            raise GradientError(f"backward: wrt node {w.name or w.id} does not require grad")
    order = _ancestors(root)
    reachable = {t.id for t in order}
    missing = [w.name or str(w.id) for w in wrt if w.id not in reachable]
    if missing:
        raise GradientError(f"backward: root does not depend on {', '.join(missing)}")

    wanted = {w.id for w in wrt}
    found: dict[int, Tensor] = {}
    grads: dict[int, Tensor] = {root.id: Tensor(np.ones(root.shape))}
    with _grad_mode(create_graph):
        for node in order:
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.id in wanted:
                found[node.id] = g
            if node._vjp is None:
                continue
            for parent, pg in zip(node.parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else add(prev, pg)

    return [found[w.id] for w in wrt]


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_k) - f(x - h e_k)) / 2h`` per coordinate."""
    if h <= 0:
        raise ValueError("finite_difference_gradient: h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        grad[k] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)
