"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array and records the operation that produced it.
Backward passes are themselves built from traced operations, so gradients of
gradients (and therefore exact Hessian-vector products) come for free.

All arithmetic is float64. Graph construction can be suspended with
``no_grad()`` for evaluation-only paths.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A node in the computation graph.

    ``_vjp`` maps the output gradient to a tuple of gradients aligned with
    ``_parents`` (``None`` for parents that do not require gradients).
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data + b.data, (a, b), lambda g: (
        _unbroadcast(g, a.shape) if a.requires_grad else None,
        _unbroadcast(g, b.shape) if b.requires_grad else None,
    ))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data - b.data, (a, b), lambda g: (
        _unbroadcast(g, a.shape) if a.requires_grad else None,
        _unbroadcast(neg(g), b.shape) if b.requires_grad else None,
    ))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data * b.data, (a, b), lambda g: (
        _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None,
        _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None,
    ))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data / b.data, (a, b), lambda g: (
        _unbroadcast(div(g, b), a.shape) if a.requires_grad else None,
        _unbroadcast(neg(div(mul(g, out_ref[0]), b)), b.shape) if b.requires_grad else None,
    ))
    out_ref = [out]
    return out


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (neg(g),))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (mul(g, mul(Tensor(2.0), a)),))


# -- transcendental -------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = _make(np.exp(a.data), (a,), lambda g: (mul(g, out_ref[0]),))
    out_ref = [out]
    return out


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.data)
    return _make(value, (a,), lambda g: (div(g, a),))


def tanh(a: Tensor) -> Tensor:
    out = _make(np.tanh(a.data), (a,), lambda g: (
        mul(g, sub(Tensor(1.0), square(out_ref[0]))),))
    out_ref = [out]
    return out


from scipy.special import expit as _sigmoid_values  # stable, C-implemented


def sigmoid(a: Tensor) -> Tensor:
    out = _make(_sigmoid_values(a.data), (a,), lambda g: (
        mul(g, mul(out_ref[0], sub(Tensor(1.0), out_ref[0]))),))
    out_ref = [out]
    return out


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x), computed as logaddexp(0, x) for stability
    return _make(np.logaddexp(0.0, a.data), (a,), lambda g: (mul(g, sigmoid(a)),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = Tensor(((a.data >= lo) & (a.data <= hi)).astype(np.float64))
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (mul(g, mask),))


# -- shape manipulation ----------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (transpose(g),))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (
        _unbroadcast(g, a.shape),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries along ``axis`` starting at ``start``."""
    idx = (slice(None),) * axis + (slice(start, start + length),)
    full = a.shape

    def vjp(g):
        return (_pad_narrow(g, axis, start, full),)

    return _make(a.data[idx], (a,), vjp)


def _pad_narrow(g: Tensor, axis: int, start: int, full_shape: tuple[int, ...]) -> Tensor:
    length = g.shape[axis]
    idx = (slice(None),) * axis + (slice(start, start + length),)
    buf = np.zeros(full_shape)
    buf[idx] = g.data

    def vjp(gg):
        return (narrow(gg, axis, start, length),)

    return _make(buf, (g,), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    def vjp(g):
        return tuple(
            narrow(g, axis, int(offsets[i]), sizes[i]) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


# -- matrix ops -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (
        matmul(g, transpose(b)) if a.requires_grad else None,
        matmul(transpose(a), g) if b.requires_grad else None,
    ))


# -- reductions ---------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    in_shape = a.shape
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)

    def vjp(g):
        if not keepdims:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))
            g = reshape(g, kshape)
        return (broadcast_to(g, in_shape),)

    return _make(np.sum(a.data, axis=axes if axis is not None else None,
                        keepdims=keepdims), (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, int):
        n = a.shape[axis]
    else:
        n = int(np.prod([a.shape[ax] for ax in axis]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


# -- composites ---------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    # max-shift is detached: it changes neither the value nor any derivative
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


# -- backward pass ------------------------------------------------------------

def backward(out: Tensor, leaves: Iterable[Tensor]) -> list[Tensor]:
    """Gradients of scalar ``out`` with respect to each tensor in ``leaves``.

    The returned gradients are themselves traced tensors, so they can be
    differentiated again (e.g. for Hessian-vector products). Leaves that do
    not influence ``out`` get zero gradients.
    """
    leaves = list(leaves)
    if out.data.size != 1:
        raise ValueError("backward expects a scalar output")

    # iterative topological sort over the requires_grad subgraph
    topo: list[Tensor] = []
    state: dict[int, int] = {}  # 0 = entered, 1 = done
    stack = [out]
    while stack:
        node = stack[-1]
        nid = id(node)
        if state.get(nid) == 1:
            stack.pop()
            continue
        if nid in state:
            state[nid] = 1
            topo.append(node)
            stack.pop()
            continue
        state[nid] = 0
        for p in node._parents:
            if p.requires_grad and state.get(id(p)) != 1:
                stack.append(p)

    grads: dict[int, Tensor] = {id(out): Tensor(np.ones_like(out.data))}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else add(acc, pg)

    return [grads.get(id(leaf)) or Tensor(np.zeros_like(leaf.data)) for leaf in leaves]
