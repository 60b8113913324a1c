"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation is a *primitive*: a forward function returning
the output array together with a closure that maps the output gradient to the
input gradients. Applying a primitive to tensors that require gradients
records a :class:`Node`; :func:`backward` orders the recorded nodes
topologically (a :class:`Tape`) and replays them in reverse.

Tests run in float64; training defaults to float32.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels

DEFAULT_DTYPE = np.float64
LAYER_NORM_EPS = 1e-5

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible input shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = shapes


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@dataclass(eq=False)
class Node:
    """One recorded primitive application."""

    op: str
    inputs: tuple
    output: "Tensor"
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """A dense n-dimensional array that can carry a gradient."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def parameter(data, dtype=DEFAULT_DTYPE, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# primitive registry
# ---------------------------------------------------------------------------

PRIMITIVES: dict[str, Callable] = {}


def primitive(name: str):
    def register(fn):
        PRIMITIVES[name] = fn
        return fn

    return register


def apply_primitive(op: str, *inputs, **attrs) -> Tensor:
    """Run primitive ``op`` on ``inputs`` and record it when gradients are needed."""
    try:
        forward = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    tensors = tuple(inputs)
    out_data, backward_fn = forward(*[t.data for t in tensors], **attrs)
    out = Tensor(out_data, dtype=out_data.dtype)
    if _grad_enabled and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        out._node = Node(op, tensors, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, detail="not broadcastable") from None


@primitive("add")
def _add(a, b):
    _check_broadcast("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@primitive("sub")
def _sub(a, b):
    _check_broadcast("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


@primitive("mul")
def _mul(a, b):
    _check_broadcast("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@primitive("scale")
def _scale(a, factor: float):
    f = a.dtype.type(factor)
    return a * f, lambda g: (g * f,)


@primitive("matmul")
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions") from None

    def back(g):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return a @ b, back


@primitive("relu")
def _relu(a):
    mask = a > 0
    return np.where(mask, a, 0).astype(a.dtype), lambda g: (g * mask,)


@primitive("sigmoid")
def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out, lambda g: (g * out * (1 - out),)


@primitive("tanh")
def _tanh(a):
    out = np.tanh(a)
    return out, lambda g: (g * (1 - out * out),)


@primitive("softmax")
def _softmax(a, axis: int = -1):
    shifted = a - a.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return s, back


@primitive("log_softmax")
def _log_softmax(a, axis: int = -1):
    shifted = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return out, back


@primitive("layer_norm")
def _layer_norm(a, eps: float = LAYER_NORM_EPS):
    mu = a.mean(axis=-1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return xhat.astype(a.dtype, copy=False), back


@primitive("dropout")
def _dropout(a, p: float, rng: np.random.Generator):
    keep = 1.0 - p
    mask = (rng.random(a.shape) < keep).astype(a.dtype) / a.dtype.type(keep)
    return a * mask, lambda g: (g * mask,)


@primitive("embedding_lookup")
def _embedding_lookup(table, ids):
    if table.ndim != 2:
        raise ShapeError("embedding_lookup", table.shape, detail="table must be 2-d")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: id out of range [0, {table.shape[0]})")

    def back(g):
        grad = np.zeros_like(table)
        _kernels.scatter_add_rows(grad, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return table[idx], back


@primitive("index_select")
def _index_select(a, index, axis: int = 0):
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("index_select", a.shape, idx.shape, detail="index must be 1-d")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise IndexError(f"index_select: index out of range for axis of length {a.shape[axis]}")

    def back(g):
        grad = np.zeros_like(a)
        if axis == 0 and a.ndim == 2:
            _kernels.scatter_add_rows(grad, idx, g)
        else:
            np.add.at(grad, (slice(None),) * (axis % a.ndim) + (idx,), g)
        return (grad,)

    return np.take(a, idx, axis=axis), back


@primitive("gather")
def _gather(a, cols):
    """Pick ``a[i, cols[i]]`` for every row i."""
    c = np.asarray(cols, dtype=np.int64)
    if a.ndim != 2 or c.shape != (a.shape[0],):
        raise ShapeError("gather", a.shape, c.shape, detail="expects [T, V] and [T]")
    if c.size and (c.min() < 0 or c.max() >= a.shape[1]):
        raise IndexError(f"gather: column out of range [0, {a.shape[1]})")
    rows = np.arange(a.shape[0])

    def back(g):
        grad = np.zeros_like(a)
        grad[rows, c] = g
        return (grad,)

    return a[rows, c], back


@primitive("concat")
def _concat(*arrays, axis: int = 0):
    if not arrays:
        raise ShapeError("concat", detail="no inputs")
    ax = axis % arrays[0].ndim
    for arr in arrays[1:]:
        if arr.ndim != arrays[0].ndim or any(
            x != y for i, (x, y) in enumerate(zip(arr.shape, arrays[0].shape)) if i != ax
        ):
            raise ShapeError("concat", *(x.shape for x in arrays), detail=f"axis {axis}")
    bounds = np.cumsum([0] + [arr.shape[ax] for arr in arrays])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(arrays))
        )

    return np.concatenate(arrays, axis=ax), back


@primitive("slice")
def _slice(a, axis: int, start: int, stop: int):
    ax = axis % a.ndim
    if not (0 <= start <= stop <= a.shape[ax]):
        raise ShapeError("slice", a.shape, detail=f"range [{start}, {stop}) on axis {axis}")
    key = (slice(None),) * ax + (slice(start, stop),)

    def back(g):
        grad = np.zeros_like(a)
        grad[key] = g
        return (grad,)

    return a[key], back


@primitive("max_over_axis")
def _max_over_axis(a, axis: int = -1):
    ax = axis % a.ndim
    arg = np.argmax(a, axis=ax)  # first index on ties
    out = np.take_along_axis(a, np.expand_dims(arg, ax), axis=ax).squeeze(ax)

    def back(g):
        grad = np.zeros_like(a)
        np.put_along_axis(grad, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (grad,)

    return out, back


@primitive("transpose")
def _transpose(a, axes=None):
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", a.shape, detail="needs at least 2 dims")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return np.transpose(a, axes), lambda g: (np.transpose(g, inv),)


@primitive("reshape")
def _reshape(a, shape):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return out, lambda g: (g.reshape(a.shape),)


@primitive("sum")
def _sum(a, axis=None, keepdims: bool = False):
    out = np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, back


# -- functional helpers -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_primitive("add", a, b)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_primitive("sub", a, b)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return apply_primitive("mul", a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return apply_primitive("scale", a, factor=float(factor))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", a, b)


def relu(a: Tensor) -> Tensor:
    return apply_primitive("relu", a)


def sigmoid(a: Tensor) -> Tensor:
    return apply_primitive("sigmoid", a)


def tanh(a: Tensor) -> Tensor:
    return apply_primitive("tanh", a)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", a, axis=axis)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("log_softmax", a, axis=axis)


def layer_norm(a: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    return apply_primitive("layer_norm", a, eps=eps)


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return a
    if p >= 1.0:
        return scale(a, 0.0)
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    return apply_primitive("dropout", a, p=float(p), rng=rng)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    return apply_primitive("embedding_lookup", table, ids=ids)


def index_select(a: Tensor, index, axis: int = 0) -> Tensor:
    return apply_primitive("index_select", a, index=index, axis=axis)


def gather(a: Tensor, cols) -> Tensor:
    return apply_primitive("gather", a, cols=cols)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive("concat", *tensors, axis=axis)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return apply_primitive("slice", a, axis=axis, start=start, stop=stop)


def max_over_axis(a: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("max_over_axis", a, axis=axis)


def transpose(a: Tensor, axes=None) -> Tensor:
    return apply_primitive("transpose", a, axes=axes)


def reshape(a: Tensor, shape) -> Tensor:
    return apply_primitive("reshape", a, shape=tuple(shape))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("sum", a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Recorded nodes reachable from a root, in topological order."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Node] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            node = t._node
            if node is None:
                continue
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((t, True))
            for inp in reversed(node.inputs):
                if inp._node is not None and id(inp._node) not in seen:
                    stack.append((inp, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` of every leaf that requires grad with d(root)/d(leaf).

    Gradients accumulate across calls; zero them explicitly between passes.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be a scalar, got shape {root.shape}")
    if tape is None:
        tape = Tape.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = ig.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + ig
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
    if root._node is None and root.requires_grad:
        one = np.ones_like(root.data)
        root.grad = one if root.grad is None else root.grad + one


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    ok: bool
    failure: str | None = None

    @property
    def worst(self) -> float:
        return max(self.max_rel_error) if self.max_rel_error else 0.0


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``. When
    ``max_elements`` is set, only a random subset of each input is probed.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for x in inputs:
        x.grad = None
        x.requires_grad = True
    out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check: f must be scalar, got shape {out.shape}")
    if not np.all(np.isfinite(out.data)):
        return GradCheckReport([], False, "non-finite output at the base point")
    backward(out)
    rng = np.random.default_rng(seed)
    errors = []
    for k, x in enumerate(inputs):
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            positions = rng.choice(flat.size, size=max_elements, replace=False)
        worst = 0.0
        with no_grad():
            for pos in positions:
                orig = flat[pos]
                flat[pos] = orig + step
                up = f(*inputs).item()
                flat[pos] = orig - step
                down = f(*inputs).item()
                flat[pos] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    return GradCheckReport(errors, False, f"non-finite output at input {k}, element {pos}")
                numeric = (up - down) / (2 * step)
                a = float(analytic.reshape(-1)[pos])
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
        errors.append(worst)
    return GradCheckReport(errors, all(e <= tolerance for e in errors))
