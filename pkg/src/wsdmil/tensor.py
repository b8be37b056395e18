"""Minimal dense tensor with reverse-mode autodiff and live-byte accounting.

Every operation records a closure that maps the output gradient onto its
inputs. ``backward`` walks the recorded graph in reverse topological order.

Allocation accounting: while a :class:`Graph` is active on the current thread,
each tensor created (and each gradient buffer attached) adds its byte size to
the graph's live counter; the bytes are released when the tensor is garbage
collected. ``Graph.peak_bytes`` is the running maximum, sampled at every op
boundary.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "precision",
    "tensor",
    "as_tensor",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "swapaxes",
    "getitem",
    "concat",
    "softmax",
    "log_softmax",
    "layer_norm",
    "conv1d_depthwise",
    "pinv_newton_schulz",
]

DTYPE = np.float64

_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", DTYPE)


@contextlib.contextmanager
def precision(dtype):
    """Run tensor math in ``dtype`` (float32 is a speed toggle; float64 is the default)."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def _current_graph() -> Optional["Graph"]:
    return getattr(_state, "graph", None)


class Graph:
    """Records ops and tracks peak live tensor bytes for one pass.

    Use as a context manager; it is confined to the thread that entered it::

        with Graph() as g:
            loss = model_loss(...)
            backward(loss)
        g.peak_bytes
    """

    def __init__(self) -> None:
        self.nodes: list[str] = []
        self.live_bytes = 0
        self.peak_bytes = 0
        self._prev: Optional[Graph] = None

    def __enter__(self) -> "Graph":
        self._prev = _current_graph()
        self.nodes = []
        self.live_bytes = 0
        self.peak_bytes = 0
        _state.graph = self
        return self

    def __exit__(self, *exc) -> None:
        _state.graph = self._prev
        self._prev = None

    def _alloc(self, nbytes: int) -> None:
        self.live_bytes += nbytes
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes

    def _free(self, nbytes: int) -> None:
        self.live_bytes -= nbytes


class Tensor:
    __slots__ = (
        "data",
        "requires_grad",
        "_grad",
        "_parents",
        "_backward",
        "op",
        "_graph",
        "_bytes",
        "__weakref__",
    )

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Optional[Callable] = None, op: str = "leaf"):
        arr = np.asarray(data, dtype=default_dtype())
        if arr.ndim and 0 in arr.shape:
            raise ValueError(f"tensor axes must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self._grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        g = _current_graph()
        self._graph = g
        self._bytes = arr.nbytes
        if g is not None:
            g._alloc(self._bytes)
            if op != "leaf":
                g.nodes.append(op)

    def __del__(self):
        g = self._graph
        if g is not None:
            g._free(self._bytes)

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self._grad

    @grad.setter
    def grad(self, value: Optional[np.ndarray]) -> None:
        old = 0 if self._grad is None else self._grad.nbytes
        new = 0 if value is None else value.nbytes
        self._grad = value
        g = self._graph
        if g is not None:
            g._free(old)
            g._alloc(new)
            self._bytes += new - old

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=parents if req else (),
                  _backward=backward_fn if req else None, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # upstream arrays may be shared views, so never accumulate in place
    if t._grad is None:
        t.grad = g
    else:
        t.grad = t._grad + g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad=True")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    # per-pass upstream buffers; leaf/param .grad accumulates across calls
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        _accumulate(node, g)
        if node._backward is None:
            continue
        grads = node._backward(g)
        for p, pg in zip(node._parents, grads):
            if pg is None or not p.requires_grad:
                continue
            pg = _unbroadcast(pg, p.shape)
            key = id(p)
            if key in upstream:
                upstream[key] = upstream[key] + pg
            else:
                upstream[key] = pg


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


# --------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    return div(sum(a, axes, keepdims), float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros(shape, dtype=default_dtype())
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw, "getitem")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, bw, "concat")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ValueError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _make(out, (a, b), bw, "matmul")


def _pinv_scale(a: Tensor) -> Tensor:
    """``1 / (||a||_1 ||a||_inf)`` shaped ``(..., 1, 1)``; subgradient at ties."""
    absd = np.abs(a.data)
    col = absd.sum(axis=-2)
    row = absd.sum(axis=-1)
    ci = col.argmax(axis=-1)
    ri = row.argmax(axis=-1)
    norm1 = np.take_along_axis(col, ci[..., None], -1)[..., 0]
    norm_inf = np.take_along_axis(row, ri[..., None], -1)[..., 0]
    prod = np.maximum(norm1 * norm_inf, np.finfo(np.float64).tiny)
    scale = (1.0 / prod)[..., None, None]

    def bw(g):
        gs = g.sum(axis=(-2, -1))
        sign = np.sign(a.data)
        n = a.shape[-1]
        pick_col = (np.arange(n) == ci[..., None])[..., None, :]
        pick_row = (np.arange(n) == ri[..., None])[..., :, None]
        coef = -gs / prod ** 2
        da = sign * (pick_col * norm_inf[..., None, None] + pick_row * norm1[..., None, None])
        return (coef[..., None, None] * da,)

    return _make(scale.astype(a.data.dtype), (a,), bw, "pinv_scale")


def pinv_newton_schulz(a, iters: int = 6) -> Tensor:
    """Iterative Moore-Penrose pseudoinverse of a square (batched) matrix.

    Starts from ``Z_0 = a^T / (||a||_1 ||a||_inf)`` and applies the third-order
    Newton-Schulz (hyperpower) update used by Nystrom attention::

        Z <- Z (13 I - a Z (15 I - a Z (7 I - a Z))) / 4

    The residual ``I - a Z`` is cubed at every step, so six steps suffice for
    the moderately conditioned landmark kernels met in practice. Built only
    from differentiable primitives, including the initial scale.
    """
    if iters < 1:
        raise ValueError(f"pinv_newton_schulz needs iters >= 1, got {iters}")
    a = as_tensor(a)
    if a.shape[-1] != a.shape[-2]:
        raise ValueError(f"pinv_newton_schulz needs square matrices, got {a.shape}")
    eye = np.eye(a.shape[-1])
    z = mul(swapaxes(a, -1, -2), _pinv_scale(a))
    for _ in range(iters):
        az = matmul(a, z)
        inner = sub(7.0 * eye, az)
        inner = sub(15.0 * eye, matmul(az, inner))
        inner = sub(13.0 * eye, matmul(az, inner))
        z = mul(matmul(z, inner), 0.25)
    return z


# --------------------------------------------------------------------------
# composite nn ops with fused backward


def softmax(x, axis: int = -1, bias: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along ``axis``; ``bias`` is an optional constant added to the logits first."""
    x = as_tensor(x)
    xd = x.data if bias is None else x.data + bias
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    n = xd.shape[-1]

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
        return (dx, g * xhat, g)

    return _make(out, (x, gain, bias), bw, "layer_norm")


def conv1d_depthwise(x, kernel) -> Tensor:
    """Length-3 zero-padded convolution along the last axis of ``x``.

    ``kernel`` has shape ``(..., 3)`` where the leading part broadcasts against
    ``x.shape[:-1]``, so one kernel can serve each channel/head.
    ``out[i] = k0 * x[i-1] + k1 * x[i] + k2 * x[i+1]``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.shape[-1] != 3:
        raise ValueError(f"conv1d_depthwise kernel must have length 3, got {kernel.shape}")
    xd = x.data
    kd = kernel.data
    k0, k1, k2 = kd[..., 0:1], kd[..., 1:2], kd[..., 2:3]
    out = k1 * xd
    out[..., 1:] += k0 * xd[..., :-1]
    out[..., :-1] += k2 * xd[..., 1:]
    kshape = kernel.shape
    red = kshape[:-1] + (1,)

    def bw(g):
        dx = k1 * g
        dx[..., :-1] += k0 * g[..., 1:]
        dx[..., 1:] += k2 * g[..., :-1]
        d0 = _unbroadcast((g[..., 1:] * xd[..., :-1]).sum(-1, keepdims=True), red)
        d1 = _unbroadcast((g * xd).sum(-1, keepdims=True), red)
        d2 = _unbroadcast((g[..., :-1] * xd[..., 1:]).sum(-1, keepdims=True), red)
        return (dx, np.concatenate([d0, d1, d2], axis=-1).reshape(kshape))

    return _make(out, (x, kernel), bw, "conv1d_depthwise")
