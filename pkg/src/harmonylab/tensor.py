"""Dense tensors with reverse-mode gradients over a closed op set.

Tensors wrap read-only float64 numpy arrays.  An op only records a graph node
when at least one input requires a gradient, so inference paths run without
any tape overhead.  Every op checks its output for NaN/Inf and raises
:class:`NumericalError` naming the op.

Supported differentiable ops: add, sub, mul, neg, matmul, reshape, transpose,
slice, concat, softmax (optionally masked), layer_norm, silu, sum, mean,
sum_sq, rope_apply.  :func:`sdpa` is a composite of matmul and softmax.
Anything else that ends up on a gradient path raises :class:`UnsupportedOp`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import InvalidHeadDim, NumericalError, ShapeError, UnsupportedOp
from .rng import Rng

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "op", "parents", "backward_fn", "requires_grad")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", parents=(), backward_fn=None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(out: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    # NaN/Inf anywhere propagates into the sum
    if not math.isfinite(out.sum()):
        raise NumericalError(f"non-finite value produced by {op}")
    if any(p.requires_grad for p in parents):
        return Tensor(out, True, op, parents, backward)
    return Tensor(out, False, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        c = float(b)
        return _node(a.data * c, "mul", (a,), lambda g: (g * c,))
    if isinstance(a, (int, float)):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        "mul",
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = 1.0 / (1.0 + np.exp(-x))
    return _node(x * s, "silu", (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


# ---- linear algebra / layout ------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul shapes {ad.shape} and {bd.shape} do not align")
    if bd.ndim == 2 and ad.ndim > 2:
        # activations times a weight matrix: one 2-D GEMM instead of a batched loop
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(*ad.shape[:-1], n)

        def backward(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _node(out, "matmul", (a, b), backward)

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, "matmul", (a, b), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    s = a.shape
    return _node(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(s),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def swap_last(a) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def slice_(a, idx) -> Tensor:
    a = as_tensor(a)
    s = a.shape

    def backward(g):
        z = np.zeros(s, dtype=g.dtype)
        z[idx] = g
        return (z,)

    return _node(a.data[idx], "slice", (a,), backward)


def concat(ts: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in ts)
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(out, "concat", ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---- reductions ------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    s = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, s),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    s = a.shape
    n = a.data.size if axis is None else int(np.prod([s[i] for i in np.atleast_1d(axis)]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, s),)

    return _node(np.mean(a.data, axis=axis, keepdims=keepdims), "mean", (a,), backward)


def sum_sq(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _node(np.sum(x * x), "sum_sq", (a,), lambda g: (2.0 * g * x,))


# ---- normalisation / attention --------------------------------------------


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability exactly 0."""
    a = as_tensor(a)
    x = a.data if mask is None else np.where(mask, a.data, -np.inf)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    p = e / np.sum(e, axis=axis, keepdims=True)
    return _node(p, "softmax", (a,), lambda g: (p * (g - np.sum(g * p, axis=axis, keepdims=True)),))


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, no affine part."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _node(xhat, "layer_norm", (a,), backward)


def rope_angles(positions, d: int, base: float) -> np.ndarray:
    if d % 2:
        raise InvalidHeadDim(f"rotary embedding needs an even head dim, got {d}")
    if base <= 1:
        raise ValueError("rope base must exceed 1")
    omega = base ** (-np.arange(0, d, 2, dtype=DTYPE) / d)
    return np.asarray(positions, dtype=DTYPE)[..., None] * omega


def rope_apply(a, positions, base: float = 100.0) -> Tensor:
    """Rotate consecutive pairs ``(x[2k], x[2k+1])`` by ``positions[t] * base**(-2k/d)``.

    ``positions`` may be fractional; it broadcasts against the second-to-last
    axis of ``a``.
    """
    a = as_tensor(a)
    ang = rope_angles(positions, a.shape[-1], base)
    cos, sin = np.cos(ang), np.sin(ang)

    def rotate(x, s):
        xe, xo = x[..., 0::2], x[..., 1::2]
        out = np.empty(np.broadcast_shapes(x.shape), dtype=DTYPE)
        out[..., 0::2] = xe * cos - xo * s
        out[..., 1::2] = xe * s + xo * cos
        return out

    return _node(rotate(a.data, sin), "rope_apply", (a,), lambda g: (rotate(g, -sin),))


def sdpa(q, k, v, scale: float, mask: np.ndarray | None = None, return_weights: bool = False):
    """``softmax(q @ k.T * scale) @ v`` over the last two axes."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"sdpa shapes q={q.shape} k={k.shape} v={v.shape} do not agree")
    if scale <= 0:
        raise ValueError("sdpa scale must be positive")
    w = softmax(mul(matmul(q, swap_last(k)), scale), axis=-1, mask=mask)
    out = matmul(w, v)
    return (out, w) if return_weights else out


# ---- gradients -------------------------------------------------------------


def _topo(out: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``out`` with respect to each tensor in ``wrt``."""
    if out.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {out.shape}")
    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
    if out.requires_grad:
        for node in reversed(_topo(out)):
            g = grads.get(id(node))
            if g is None or not node.parents:
                continue
            if node.backward_fn is None:
                raise UnsupportedOp(f"no gradient rule for op {node.op!r}")
            for p, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = grads[k] + pg if k in grads else pg
    result = []
    for w in wrt:
        g = grads.get(id(w))
        result.append(np.zeros(w.shape, dtype=DTYPE) if g is None else np.array(g, dtype=DTYPE))
    return result


def nondiff(fn: Callable[[np.ndarray], np.ndarray], a, name: str | None = None) -> Tensor:
    """Apply a numpy function with no gradient rule; gradients through it raise UnsupportedOp."""
    a = as_tensor(a)
    out = np.asarray(fn(a.data), dtype=DTYPE)
    op = name or getattr(fn, "__name__", "nondiff")
    return Tensor(out, a.requires_grad, op, (a,) if a.requires_grad else (), None)


def grad(f: Callable[..., Tensor], *inputs) -> tuple[float, list[np.ndarray]]:
    """Evaluate scalar ``f(*inputs)`` and return ``(value, [df/dinput, ...])``."""
    leaves = [Tensor(as_tensor(x).data, requires_grad=True) for x in inputs]
    out = f(*leaves)
    return out.item(), backward(out, leaves)


def rng_normal(rng: Rng, shape) -> Tensor:
    return Tensor(rng.normal(shape))


# ---- finite differences ----------------------------------------------------


@dataclass
class GradReport:
    max_rel_err: float
    worst_coordinate: tuple
    passed: bool
    n_checked: int = 0


def finite_diff_check(
    f: Callable,
    x,
    h: float = 1e-5,
    tol: float = 1e-4,
    analytic=None,
) -> GradReport:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    ``x`` is an array (``f`` takes one Tensor) or a mapping of arrays (``f``
    takes a dict of Tensors).  ``analytic`` overrides the reverse-mode
    gradient, which is how a corrupted gradient is shown to be caught.
    Coordinates are reported as index paths: ``(i, j, ...)`` or
    ``(name, i, j, ...)``.
    """
    if not 0 < h < 1e-2:
        raise ValueError("h must lie in (0, 1e-2)")
    named = isinstance(x, Mapping)
    base = {k: np.array(v, dtype=DTYPE) for k, v in x.items()} if named else {None: np.array(x, dtype=DTYPE)}

    def call(arrs, track=False):
        ts = {k: Tensor(v, requires_grad=track) for k, v in arrs.items()}
        out = f(ts) if named else f(ts[None])
        if not np.isfinite(out.data).all():
            raise NumericalError("objective is not finite")
        return out, ts

    if analytic is None:
        out, ts = call(base, track=True)
        keys = list(ts)
        analytic = dict(zip(keys, backward(out, [ts[k] for k in keys])))
    elif not named:
        analytic = {None: np.asarray(analytic, dtype=DTYPE)}

    worst, worst_idx, n = -1.0, (), 0
    for k, arr in base.items():
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = call(base)[0].item()
            arr[idx] = orig - h
            fm = call(base)[0].item()
            arr[idx] = orig
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[k][idx])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            n += 1
            if err > worst:
                worst, worst_idx = err, (idx if k is None else (k, *idx))
    return GradReport(worst, tuple(int(i) if isinstance(i, (np.integer, int)) else i for i in worst_idx), worst <= tol, n)
