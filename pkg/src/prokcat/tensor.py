"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor` whose ``node`` records its inputs and a
backward rule.  :meth:`Tape.from_output` orders those nodes topologically and
:func:`backward` replays them in reverse.  Broadcasting follows numpy, which is
limited to stretching length-1 axes and inserting leading axes; backward rules
sum-reduce gradients back onto the input shape.
"""
from __future__ import annotations

import contextlib
import math
import os
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from prokcat import _kernels

_state = threading.local()


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf while finite checks were enabled."""


def _flag(name: str, default: bool) -> bool:
    if not hasattr(_state, name):
        setattr(_state, name, default)
    return getattr(_state, name)


def grad_enabled() -> bool:
    return _flag("grad_enabled", True)


_ENV_DEBUG = os.environ.get("PROKCAT_DEBUG", "") not in ("", "0")


def debug_enabled() -> bool:
    return _flag("debug", _ENV_DEBUG)


def set_debug(on: bool) -> None:
    """Toggle NaN/Inf detection at op boundaries for the current thread."""
    _state.debug = bool(on)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    output: "Tensor | None" = None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _raise_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _check_finite(op: str, arr: np.ndarray) -> None:
    if debug_enabled() and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(op: str, arr: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    _check_finite(op, arr)
    out = Tensor._wrap(arr)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, rule, out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def elementwise(a, b, op: str) -> Tensor:
    fns = {"add": add, "sub": sub, "mul": mul}
    if op not in fns:
        raise ValueError(f"unknown elementwise op {op!r}")
    return fns[op](a, b)


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make("square", x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _make("abs", np.abs(x.data), (x,), lambda g: (np.sign(x.data) * g,))


# ---------------------------------------------------------------- activations

def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make("silu", x.data * s, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make("leaky_relu", np.where(mask, x.data, slope * x.data), (x,),
                 lambda g: (np.where(mask, g, slope * g),))


ACTIVATIONS = {"tanh": tanh, "silu": silu, "leaky_relu": leaky_relu, "relu": relu, "sigmoid": sigmoid}


def activation(x, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product; leading axes (if any) are batch axes and broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} differ") from None
    out = np.matmul(a.data, b.data)

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: fold the batch axes into one product
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), rule)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or apply an explicit permutation."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose needs at least 2 axes, got {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight (+ bias); weight is stored as (fan_in, fan_out).  ``x`` may be 1-d."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim == 1:
        y = reshape(matmul(reshape(x, (1, x.shape[0])), weight), (weight.shape[-1],))
    else:
        y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------------- reductions

def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def sum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    if axis is None:
        return _make("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    ax = _axis(x, axis)
    out = x.data.sum(axis=ax, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", out, (x,), rule)


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[_axis(x, axis)]
    if n == 0:
        raise ShapeError(f"mean over empty axis of shape {x.shape}")
    return mul(sum(x, axis, keepdims), 1.0 / n)


def mean_pool(x, axis: int = 0, mask: np.ndarray | None = None) -> Tensor:
    """Arithmetic mean over the length axis; ``mask`` marks valid rows (..., L)."""
    x = as_tensor(x)
    ax = _axis(x, axis)
    if x.shape[ax] == 0:
        raise ShapeError("mean_pool over an empty axis")
    if mask is None:
        return mean(x, ax)
    m = np.asarray(mask, dtype=np.float64)
    counts = m.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise ShapeError("mean_pool: a masked slice has no valid rows")
    w = (m / counts)[..., None]
    return sum(mul(x, w), ax)


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax; masked-out entries get probability exactly 0."""
    x = as_tensor(x)
    ax = _axis(x, axis)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if np.any(~mask.any(axis=ax)):
            raise ShapeError("softmax: a slice is fully masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _make("softmax", y, (x,), rule)


# ---------------------------------------------------------------- structure

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    if len(ts) == 1:
        return ts[0]
    ax = _axis(ts[0], axis)
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} differ off axis {ax}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _make("concat", out, tuple(ts), lambda g: tuple(np.split(g, cuts, axis=ax)))


def take_rows(table, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-d table; ``index`` may have any shape."""
    table = as_tensor(table)
    idx = np.asarray(index, dtype=np.intp)

    def rule(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (acc,)

    return _make("take_rows", table.data[idx], (table,), rule)


def conv1d(x, kernels, padding: str = "same") -> Tensor:
    """Zero-padded cross-correlation along the sequence axis.

    ``x`` is (..., L, c_in); ``kernels`` is (w, c_in, c_out) with odd ``w``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if padding != "same":
        raise ValueError("only 'same' padding is supported")
    w, c_in, c_out = kernels.shape
    if w % 2 == 0:
        raise ShapeError(f"conv1d: kernel width must be odd, got {w}")
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d: input channels {x.shape[-1]} != kernel channels {c_in}")
    half = w // 2
    L = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x.data, pad)
    # windows: (..., L, w, c_in)
    win = np.stack([xp[..., i:i + L, :] for i in range(w)], axis=-2)
    flat = win.reshape(*win.shape[:-2], w * c_in)
    kflat = kernels.data.reshape(w * c_in, c_out)
    out = flat @ kflat

    def rule(g):
        gk = np.tensordot(flat, g, axes=(tuple(range(flat.ndim - 1)), tuple(range(g.ndim - 1))))
        gwin = (g @ kflat.T).reshape(win.shape)
        gxp = np.zeros_like(xp)
        for i in range(w):
            gxp[..., i:i + L, :] += gwin[..., i, :]
        return gxp[..., half:half + L, :], gk.reshape(kernels.shape)

    return _make("conv1d", out, (x, kernels), rule)


def bspline(x, knots: np.ndarray, order: int) -> Tensor:
    """B-spline basis values of every element of ``x``; appends an axis of size len(knots)-order-1."""
    x = as_tensor(x)
    basis, dbasis = _kernels.bspline_basis(x.data.reshape(-1), np.asarray(knots, dtype=np.float64), order)
    nb = basis.shape[1]
    out = basis.reshape(*x.shape, nb)
    d = dbasis.reshape(*x.shape, nb)
    return _make("bspline", out, (x,), lambda g: ((g * d).sum(axis=-1),))


# ---------------------------------------------------------------- tape

@dataclass
class Tape:
    """Operations reachable from an output, in recording (topological) order."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            node = t.node
            if node is None:
                continue
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((t, True))
            for inp in node.inputs:
                if inp.node is not None and id(inp.node) not in seen:
                    stack.append((inp, False))
        return cls(order)

    def backward(self, out: Tensor, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(out): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    grads[key] = grads[key] + gi if key in grads else gi


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients accumulate across calls; reset with :meth:`Tensor.zero_grad`.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    Tape.from_output(loss).backward(loss, np.ones_like(loss.data))


# ---------------------------------------------------------------- params & optimisation

def parameter(arr, name: str | None = None) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


def glorot(rng: np.random.Generator, shape: Sequence[int], fan_in: int | None = None,
           fan_out: int | None = None) -> np.ndarray:
    fan_in = shape[-2] if fan_in is None and len(shape) >= 2 else (fan_in or shape[0])
    fan_out = shape[-1] if fan_out is None else fan_out
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("adam_step: params, grads and state differ in length")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} / state {m.shape} vs param {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
