"""Dense arrays with opt-in reverse-mode differentiation.

A ``Tensor`` wraps a numpy array. Operations only record a graph node when
tracing is enabled (``with tracing():``) and at least one input requires a
gradient, so plain inference pays no bookkeeping cost. Gradients are pulled
out with ``backward(objective, inputs)``.

Spatial feature maps are channels-last: ``(N, H, W, C)``.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, InvalidShapeError, NumericError

_local = threading.local()


def _get(name, default):
    return getattr(_local, name, default)


def get_dtype():
    return _get("dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Set the engine's compute precision for the enclosed block."""
    prev = get_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


def is_tracing() -> bool:
    return _get("tracing", False)


@contextlib.contextmanager
def tracing(enabled: bool = True):
    prev = is_tracing()
    _local.tracing = enabled
    try:
        yield
    finally:
        _local.tracing = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=get_dtype())
        if not np.isfinite(self.data).all():
            raise NumericError("tensor initialised with non-finite values")
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    if not np.isfinite(out.data).all():
        raise NumericError(f"{op} produced non-finite values")
    out.op = op
    out.requires_grad = False
    out._parents = ()
    out._vjp = None
    if is_tracing() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("div: division by zero")
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return _make(out, (a, b), vjp, "div")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _make(x.data * s, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),), "silu")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise InvalidShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise InvalidShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))
    return _make(a.data @ b.data, (a, b), vjp, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is ``(d_in, d_out)``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise InvalidShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise InvalidShapeError(f"linear: bias shape {b.shape} does not match {w.shape}")
        out = out + b.data
        parents.append(b)

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0) if b.requires_grad else None)
        return tuple(grads)
    return _make(out.reshape(lead + (w.shape[1],)), parents, vjp, "linear")


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = np.empty((n, h, w, kh * kw * c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            k = (i * kw + j) * c
            cols[..., k:k + c] = xp[:, i:i + h, j:j + w, :]
    return cols


def _col2im(cols: np.ndarray, shape, kh: int, kw: int) -> np.ndarray:
    n, h, w, c = shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            k = (i * kw + j) * c
            xp[:, i:i + h, j:j + w, :] += cols[..., k:k + c]
    return xp[:, ph:ph + h, pw:pw + w, :]


def conv2d_same(x, w, b=None) -> Tensor:
    """Zero-padded 'same' convolution. ``x``: (N,H,W,Cin); ``w``: (kh,kw,Cin,Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[-1] != w.shape[2]:
        raise InvalidShapeError(f"conv2d_same: incompatible shapes {x.shape} and {w.shape}")
    kh, kw, cin, cout = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidShapeError(f"conv2d_same: kernel must have odd extents, got {w.shape}")
    cols = _im2col(x.data, kh, kw)
    wm = w.data.reshape(-1, cout)
    out = cols.reshape(-1, wm.shape[0]) @ wm
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise InvalidShapeError(f"conv2d_same: bias shape {b.shape} does not match {w.shape}")
        out = out + b.data
        parents.append(b)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gx = gw = None
        if x.requires_grad:
            gx = _col2im((g2 @ wm.T).reshape(cols.shape), x.shape, kh, kw)
        if w.requires_grad:
            gw = (cols.reshape(-1, wm.shape[0]).T @ g2).reshape(w.shape)
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0) if b.requires_grad else None)
        return tuple(grads)
    return _make(out.reshape(x.shape[:3] + (cout,)), parents, vjp, "conv2d_same")


def group_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Single-group normalisation: statistics over every axis except the first."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise InvalidShapeError(
            f"group_norm: affine shapes {gamma.shape}/{beta.shape} do not match {x.shape}")
    axes = tuple(range(1, x.ndim))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    with np.errstate(over="ignore"):
        var = (xc * xc).mean(axis=axes, keepdims=True)
    if not np.isfinite(var).all():
        raise NumericError("group_norm: variance overflowed")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    m = int(np.prod(x.shape[1:]))

    def vjp(g):
        gxhat = g * gamma.data
        gx = None
        if x.requires_grad:
            gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True) / m)
        red = tuple(range(x.ndim - 1))
        return (gx,
                (g * xhat).sum(axis=red) if gamma.requires_grad else None,
                g.sum(axis=red) if beta.requires_grad else None)
    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), vjp, "group_norm")


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting each row's max."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise InvalidShapeError(f"softmax_rows: empty last axis in shape {x.shape}")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)
    return _make(p, (x,), vjp, "softmax_rows")


# -- structural -------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise InvalidShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def slice_(x, idx) -> Tensor:
    x = as_tensor(x)
    out = x.data[idx]

    parts = idx if isinstance(idx, tuple) else (idx,)
    # basic indexing never repeats an element, so plain assignment is enough
    basic = all(isinstance(k, (slice, int, np.integer)) or k is Ellipsis or k is None for k in parts)

    def vjp(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)
    return _make(np.array(out), (x,), vjp, "slice")


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(x.data, indices, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gm = np.moveaxis(gx, axis, 0)
        np.add.at(gm, indices.reshape(-1),
                  np.moveaxis(g, list(range(axis, axis + indices.ndim)),
                              list(range(indices.ndim))).reshape((-1,) + gm.shape[1:]))
        return (gx,)
    return _make(out, (x,), vjp, "take")


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
                a != b for k, (a, b) in enumerate(zip(x.shape, ref)) if k != ax):
            raise InvalidShapeError(f"concat: incompatible shapes {ref} and {x.shape}")
    sizes = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=ax))
    return _make(np.concatenate([x.data for x in xs], axis=ax), xs, vjp, "concat")


def avg_pool2(x) -> Tensor:
    """2x2 average pooling of a (N,H,W,C) map."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise InvalidShapeError(f"avg_pool2: odd spatial extents in {x.shape}")
    out = x.data.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)
    return _make(out, (x,), vjp, "avg_pool2")


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of a (N,H,W,C) map."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def vjp(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)
    return _make(out, (x,), vjp, "upsample2")


# -- reductions -------------------------------------------------------------

def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(out, (x,), vjp, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(out.size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)
    return _make(out, (x,), vjp, "mean")


def sum_squares(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.sum(x.data * x.data), (x,), lambda g: (2.0 * g * x.data,), "sum_squares")


PRIMITIVES = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "conv2d-same": conv2d_same,
    "linear": linear,
    "group-normalize": group_norm,
    "softmax-rows": softmax_rows,
    "reshape": reshape,
    "slice": slice_,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "mean": mean,
    "sum-squares": sum_squares,
}


def primitive_forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``primitive_forward("matmul", a, b)``."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ContractError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# -- reverse pass -----------------------------------------------------------

class ComputeGraph:
    """Nodes reachable from ``objective`` through gradient-carrying edges,
    in topological order (every node after all of its inputs)."""

    def __init__(self, objective: Tensor):
        self.objective = objective
        nodes, seen = [], set()
        stack = [(objective, False)]
        while stack:
            node, done = stack.pop()
            if done:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)


def backward(objective: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``objective`` with respect to each of ``inputs``.

    Inputs that the objective does not depend on get zero gradients.
    """
    if objective.data.size != 1:
        raise ContractError(f"backward needs a scalar objective, got shape {objective.shape}")
    wanted = {id(x) for x in inputs}
    grads = {id(objective): np.ones_like(objective.data)}
    if objective.requires_grad:
        for node in reversed(ComputeGraph(objective).nodes):
            g = grads.get(id(node)) if id(node) in wanted else grads.pop(id(node), None)
            if g is None or node._vjp is None:
                continue
            for p, gp in zip(node._parents, node._vjp(g)):
                if gp is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + gp
                else:
                    grads[key] = gp
    out = []
    for x in inputs:
        g = grads.get(id(x))
        out.append(np.zeros_like(x.data) if g is None else np.asarray(g, dtype=x.data.dtype).reshape(x.shape))
    return out


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-4,
                      batch_f: Callable[[np.ndarray], np.ndarray] | None = None, chunk: int = 64) -> float:
    """Max relative error between the traced gradient of ``f`` at ``x`` and
    central differences: ``|analytic - numeric| / max(1e-12, |numeric|)``.

    ``batch_f``, if given, maps a stack ``(K, *x.shape)`` of inputs to their K
    objective values; the perturbed inputs are then evaluated ``chunk`` at a time.
    """
    x0 = np.array(x, dtype=get_dtype())
    leaf = Tensor(x0, requires_grad=True)
    with tracing():
        val = f(leaf)
    if not np.isfinite(val.data).all():
        raise NumericError("finite_diff_check: objective is not finite")
    analytic = backward(val, [leaf])[0].reshape(-1)
    n = x0.size
    if batch_f is None:
        def batch_f(xs):
            return np.array([f(Tensor(v)).item() for v in xs])
        chunk = 1
    values = np.empty(2 * n)
    for lo in range(0, 2 * n, chunk):
        idx = np.arange(lo, min(2 * n, lo + chunk))
        xs = np.repeat(x0.reshape(1, -1), idx.size, axis=0)
        xs[np.arange(idx.size), idx // 2] += np.where(idx % 2 == 0, step, -step)
        values[idx] = np.asarray(batch_f(xs.reshape((idx.size,) + x0.shape)), dtype=np.float64).reshape(-1)
    bad = ~np.isfinite(values)
    if bad.any():
        raise NumericError(f"finite_diff_check: objective not finite at coordinate {int(np.flatnonzero(bad)[0]) // 2}")
    numeric = (values[0::2] - values[1::2]) / (2.0 * step)
    err = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
