"""Dense float64 arrays with reverse-mode automatic differentiation.

A ``Graph`` is an append-only tape of ``Tensor`` nodes built define-by-run.
Every vector-Jacobian product is written in terms of the public ops, so
calling :func:`backward` with ``create_graph=True`` records the backward
pass itself onto the tape and second-order gradients come out exact.
Gradient accumulation walks nodes in reverse id order and sums in a fixed
order, which makes repeated backward passes bit-reproducible.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Shape mismatch in an op, carrying the op name and offending shapes."""

    def __init__(self, op: str, shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


_GRAD_MODE = threading.local()


def grad_enabled() -> bool:
    return getattr(_GRAD_MODE, "enabled", True)


@contextmanager
def _set_grad(enabled: bool):
    prev = grad_enabled()
    _GRAD_MODE.enabled = enabled
    try:
        yield
    finally:
        _GRAD_MODE.enabled = prev


def no_grad():
    """Context manager under which ops build no graph nodes."""
    return _set_grad(False)


class Graph:
    """Append-only record of tensors; node ids give a topological order."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _append(self, t: "Tensor") -> None:
        t.nid = len(self.nodes)
        self.nodes.append(t)

    def leaf(self, data, name: str | None = None) -> "Tensor":
        """Record an input tensor whose gradient we want."""
        return Tensor(np.asarray(data, dtype=np.float64), graph=self, op="leaf", name=name)

    def release(self) -> None:
        """Break the node reference cycles so the tape frees immediately.

        Nodes point at the graph and the graph points back at every node, so
        a dropped tape waits for the cycle collector, which is too slow when
        each tape pins large arrays.  Training loops call this once a step
        has extracted what it needs; the graph is unusable afterwards.
        """
        for t in self.nodes:
            t.parents = ()
            t._vjp = None
            t.grad = None
            t.graph = None
        self.nodes.clear()


class Tensor:
    """Immutable float64 array, optionally recorded on a graph."""

    def __init__(self, data, graph=None, op="const", parents=(), vjp=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.graph = graph
        self.nid: int | None = None
        self.op = op
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self._vjp = vjp
        self.name = name
        self.grad: Tensor | None = None
        if graph is not None:
            graph._append(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" nid={self.nid}" if self.nid is not None else ""
        return f"Tensor(op={self.op!r}, shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def constant(data) -> Tensor:
    """Wrap data as an untracked tensor (no gradient flows into it)."""
    return Tensor(np.asarray(data, dtype=np.float64))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _record(op: str, data: np.ndarray, parents, vjp) -> Tensor:
    """Build the output tensor, tracked iff grad mode is on and a parent is."""
    if grad_enabled():
        graph = None
        for p in parents:
            if p.graph is not None:
                if graph is not None and graph is not p.graph:
                    raise ValueError(f"{op}: inputs belong to different graphs")
                graph = p.graph
        if graph is not None:
            return Tensor(data, graph=graph, op=op, parents=parents, vjp=vjp)
    return Tensor(data)


# ---------------------------------------------------------------------------
# elementwise arithmetic (with numpy broadcasting)


def _sum_to(t: Tensor, shape) -> Tensor:
    """Reduce a broadcast gradient back to the given shape."""
    shape = tuple(shape)
    if t.data.shape == shape:
        return t
    extra = t.data.ndim - len(shape)
    if extra > 0:
        t = tsum(t, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and t.data.shape[i] != 1)
    if axes:
        t = tsum(t, axis=axes, keepdims=True)
    if t.data.shape != shape:
        return reshape(t, shape)
    return t


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", (a.shape, b.shape)) from None
    return _record("add", data, (a, b),
                   lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", (a.shape, b.shape)) from None
    return _record("sub", data, (a, b),
                   lambda g: (_sum_to(g, a.shape), _sum_to(neg(g), b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", (a.shape, b.shape)) from None
    return _record("mul", data, (a, b),
                   lambda g: (_sum_to(mul(g, b), a.shape), _sum_to(mul(g, a), b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError("div", (a.shape, b.shape)) from None
    return _record("div", data, (a, b),
                   lambda g: (_sum_to(div(g, b), a.shape),
                              _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (neg(g),))


# ---------------------------------------------------------------------------
# shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", (a.shape, b.shape), "needs (...,n,k)@(...,k,m)")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", (a.shape, b.shape)) from None

    def vjp(g):
        return (_sum_to(matmul(g, _swap_last(b)), a.shape),
                _sum_to(matmul(_swap_last(a), g), b.shape))

    return _record("matmul", data, (a, b), vjp)


def _swap_last(t: Tensor) -> Tensor:
    axes = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return transpose(t, axes)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", (a.shape, tuple(np.atleast_1d(shape)))) from None
    return _record("reshape", data, (a,), lambda g: (reshape(g, old),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", tuple(t.shape for t in tensors)) from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        outs = []
        for i, t in enumerate(tensors):
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(take(g, tuple(key)))
        return tuple(outs)

    return _record("concat", data, tensors, vjp)


def take(a, key) -> Tensor:
    """Basic/advanced indexing; gradient scatters back into the source shape."""
    a = as_tensor(a)
    data = a.data[key]
    shape = a.shape
    return _record("take", np.array(data), (a,),
                   lambda g: (_embed(g, shape, key),))


def _embed(g, shape, key) -> Tensor:
    """Adjoint of ``take``: place g into zeros of the given shape."""
    g = as_tensor(g)
    out = np.zeros(shape, dtype=np.float64)
    np.add.at(out, key, g.data)
    return _record("embed", out, (g,), lambda g2: (take(g2, key),))


def gather(a, indices, axis: int = -1) -> Tensor:
    """Select entries along an axis per ``np.take_along_axis``."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.ndim != a.ndim:
        raise ShapeError("gather", (a.shape, indices.shape), "index rank must match")
    data = np.take_along_axis(a.data, indices, axis=axis)
    shape = a.shape
    return _record("gather", data, (a,),
                   lambda g: (_scatter_add(g, indices, axis, shape),))


def _scatter_add(g, indices, axis, shape) -> Tensor:
    g = as_tensor(g)
    out = np.zeros(shape, dtype=np.float64)
    grids = list(np.ogrid[tuple(slice(n) for n in indices.shape)])
    grids[axis if axis >= 0 else g.ndim + axis] = indices
    np.add.at(out, tuple(grids), g.data)
    return _record("scatter_add", out, (g,),
                   lambda g2: (gather(g2, indices, axis),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", (a.shape, tuple(shape))) from None
    return _record("broadcast_to", np.array(data), (a,), lambda g: (_sum_to(g, old),))


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    data = np.sum(a.data, axis=axes, keepdims=keepdims)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def vjp(g):
        if not keepdims:
            g = reshape(g, kept)
        return (broadcast_to(g, shape),)

    return _record("sum", data, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _record("exp", np.exp(a.data), (a,), None)
    out._vjp = lambda g: (mul(g, out),)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record("log", np.log(a.data), (a,), lambda g: (div(g, a),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = _record("sqrt", np.sqrt(a.data), (a,), None)
    out._vjp = lambda g: (div(mul(g, 0.5), out),)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _record("tanh", np.tanh(a.data), (a,), None)
    out._vjp = lambda g: (mul(g, sub(1.0, mul(out, out))),)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _record("relu", a.data * mask, (a,), lambda g: (mul(g, constant(mask)),))


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh form."""
    a = as_tensor(a)
    c = np.sqrt(2.0 / np.pi)
    inner = mul(add(a, mul(mul(mul(a, a), a), 0.044715)), c)
    return mul(mul(a, 0.5), add(1.0, tanh(inner)))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=axis, keepdims=True)
    out = _record("softmax", data, (a,), None)
    out._vjp = lambda g: (mul(out, sub(g, tsum(mul(g, out), axis=axis, keepdims=True))),)
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    data = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = _record("log_softmax", data, (a,), None)

    def vjp(g):
        s = exp(out)
        return (sub(g, mul(s, tsum(g, axis=axis, keepdims=True))),)

    out._vjp = vjp
    return out


def layer_norm(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Normalize to zero mean, unit variance along an axis (no affine part)."""
    a = as_tensor(a)
    mu = tmean(a, axis=axis, keepdims=True)
    centered = sub(a, mu)
    var = tmean(mul(centered, centered), axis=axis, keepdims=True)
    return div(centered, sqrt(add(var, eps)))


# ---------------------------------------------------------------------------
# backward


def backward(root: Tensor, create_graph: bool = False) -> dict[int, Tensor]:
    """Populate ``.grad`` on every recorded node reachable from a scalar root.

    Returns the gradients keyed by node id.  With ``create_graph=True`` the
    returned gradients are themselves recorded on the tape and can be
    differentiated again.
    """
    if root.graph is None or root.nid is None:
        raise ValueError("backward: root is not recorded on a graph")
    if root.size != 1:
        raise ShapeError("backward", (root.shape,), "root must be scalar")
    graph = root.graph
    grads: dict[int, Tensor] = {root.nid: constant(np.ones_like(root.data))}
    with _set_grad(create_graph):
        for nid in range(root.nid, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = graph.nodes[nid]
            node.grad = g
            if node._vjp is None:
                continue
            for parent, pg in zip(node.parents, node._vjp(g)):
                if parent.nid is None or pg is None:
                    continue
                prev = grads.get(parent.nid)
                grads[parent.nid] = pg if prev is None else add(prev, pg)
    return grads


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    """Adam moments plus an optional cosine learning-rate anneal."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    anneal_period: int | None = None
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def cosine_lr(base_lr: float, steps_done: int, period: int) -> float:
    """Half-cosine decay from base_lr toward 0 over ``period`` steps."""
    frac = min(steps_done / period, 1.0)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One Adam update over named parameter arrays; returns the new params."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"adam_step: non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError("adam_step", (params[name].shape, g.shape), name)
    lr = state.lr
    if state.anneal_period is not None:
        lr = cosine_lr(state.lr, state.step, state.anneal_period)
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def sgd_step(params: dict, grads: dict, beta: float) -> dict:
    """Plain gradient descent: params minus beta times grads."""
    if beta <= 0:
        raise ValueError("sgd_step: beta must be positive")
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError("sgd_step", (p.shape, g.shape), name)
        out[name] = p - beta * g
    return out
