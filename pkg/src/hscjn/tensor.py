"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every op that touches a tensor with
``requires_grad`` records its inputs and a local backward rule; calling
:func:`backward` on a scalar result orders the recorded graph into a
:class:`Tape` and replays it in reverse, accumulating into the ``grad`` of
every leaf that asked for one.

Only what the dialogue model needs is here: matmul (2-D and batched 3-D),
broadcasting elementwise arithmetic, the usual activations, softmax and
log-softmax, concat/stack/reshape/slicing, row gathers, and reductions.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "no_grad",
    "is_grad_enabled",
    "set_debug",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "log_sigmoid",
    "elementwise",
    "softmax",
    "log_softmax",
    "concat",
    "stack",
    "reshape",
    "take_rows",
    "masked_fill",
    "clip_min",
    "reduce",
    "tsum",
    "mean",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of the op."""


_GRAD_ENABLED = True
_DEBUG = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_debug(flag: bool) -> None:
    """Check every forward value and every gradient for NaN/Inf."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op result, recording the node when any input needs a gradient."""
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands, or batched product of 3-D operands.

    A 1-D right operand is treated as a column and squeezed back out.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 2 and b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), (a.shape[0],))
    if a.ndim not in (2, 3) or a.ndim != b.ndim:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    av, bv = a.data, b.data
    out = av @ bv

    def _bw(g):
        if av.ndim == 2:
            return g @ bv.T, av.T @ g
        return g @ bv.transpose(0, 2, 1), av.transpose(0, 2, 1) @ g

    return _make(out, (a, b), _bw, "matmul")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _broadcast_shape(a, b, "mul")
    av, bv = a.data, b.data

    def _bw(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _make(av * bv, (a, b), _bw, "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    av = a.data
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) as min(x, 0) - log1p(exp(-|x|)); finite for finite x."""
    a = _as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid_np(-x),), "log_sigmoid")


def clip_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    a = _as_tensor(a)
    keep = a.data > floor
    out = np.where(keep, a.data, np.asarray(floor, dtype=a.dtype))
    return _make(out, (a,), lambda g: (g * keep,), "clip_min")


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "log": log, "exp": exp, "neg": neg}
_BINARY = {"add": add, "mul": mul}


def elementwise(op_name: str, *args) -> Tensor:
    """Dispatch an elementwise op by name."""
    if op_name in _UNARY:
        if len(args) != 1:
            raise TypeError(f"{op_name} takes one operand, got {len(args)}")
        return _UNARY[op_name](args[0])
    if op_name in _BINARY:
        if len(args) != 2:
            raise TypeError(f"{op_name} takes two operands, got {len(args)}")
        return _BINARY[op_name](*args)
    raise ValueError(f"unknown elementwise op {op_name!r}")


# ---------------------------------------------------------------------------
# normalisers


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (a,), _bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    z = x - np.max(x, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse

    def _bw(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (a,), _bw, "log_softmax")


# ---------------------------------------------------------------------------
# structure


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    if len(tensors) == 1:
        return tensors[0]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            shapes = ", ".join(str(u.shape) for u in tensors)
            raise ShapeError(f"concat: incompatible shapes along axis {axis}: {shapes}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ: {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def _bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(out, tensors, _bw, "stack")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def getitem(a, idx) -> Tensor:
    """Basic slicing; the backward rule scatters into a zero array."""
    a = _as_tensor(a)
    out = a.data[idx]
    src, dt = a.shape, a.dtype

    def _bw(g):
        full = np.zeros(src, dtype=dt)
        full[idx] = g
        return (full,)

    return _make(np.array(out, copy=True), (a,), _bw, "getitem")


def take_rows(a, index) -> Tensor:
    """Gather rows of a 2-D tensor (embedding lookup). Repeated rows accumulate."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"take_rows: expected a matrix, got shape {a.shape}")
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise IndexError(f"take_rows: index out of range for {a.shape[0]} rows")
    out = a.data[index]
    src, dt = a.shape, a.dtype

    def _bw(g):
        full = np.zeros(src, dtype=dt)
        np.add.at(full, index.reshape(-1), g.reshape(-1, src[1]))
        return (full,)

    return _make(out, (a,), _bw, "take_rows")


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is True with a constant (e.g. -inf scores)."""
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not match {a.shape}")
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    keep = ~mask
    return _make(out, (a,), lambda g: (g * keep,), "masked_fill")


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    out = np.sum(a.data, axis=axis)

    def _bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(out), (a,), _bw, "sum")


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reduce(a, mode: str = "sum", axis=None) -> Tensor:
    if mode == "sum":
        return tsum(a, axis)
    if mode == "mean":
        return mean(a, axis)
    raise ValueError(f"unknown reduction {mode!r}")


# ---------------------------------------------------------------------------
# differentiation


@dataclass
class Tape:
    """Recorded ops reachable from a root, in topological (creation) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay_backward(self, seed: np.ndarray) -> None:
        root = self.nodes[-1]
        grads: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if _DEBUG and not np.all(np.isfinite(g)):
                    raise FloatingPointError(f"non-finite gradient reached leaf {node.name or node.shape}")
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if _DEBUG and not np.all(np.isfinite(pg)):
                    raise FloatingPointError(f"non-finite gradient from {node._op}")
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf.

    Gradients add onto whatever ``grad`` already holds, so calling this twice
    without zeroing doubles them.
    """
    if loss.size != 1:
        raise ValueError(f"backward: root must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: root does not depend on any tensor requiring grad")
    tape = Tape.from_root(loss)
    tape.replay_backward(np.ones(loss.shape, dtype=loss.dtype))


def grad_check(
    f: Callable[[], Tensor] | Callable[[Tensor], Tensor],
    x: Tensor | Iterable[Tensor],
    eps: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is called with ``x`` when ``x`` is a single tensor, and with no
    arguments when ``x`` is a collection of tensors it closes over. The error
    per coordinate is |a - n| / (|a| + |n| + 1e-12).
    """
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)
    call = (lambda: f(x)) if single else f
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = call()
    if out.size != 1:
        raise ValueError("grad_check: f must be scalar-valued")
    backward(out)
    worst = 0.0
    for t in xs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        an = analytic.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = flat[i]
                fp = call().item()
                flat[i] = orig - eps
                lo = flat[i]
                fm = call().item()
                flat[i] = orig
                # divide by the step actually taken, not the nominal 2 * eps
                num = (fp - fm) / (hi - lo)
                err = abs(an[i] - num) / (abs(an[i]) + abs(num) + 1e-12)
                if err > worst or math.isnan(err):
                    worst = err
        t.grad = None
    return float(worst)
