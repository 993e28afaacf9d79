"""Differentiable operations on :class:`~rgbd_vsod.tensor.Tensor`.

Image-like tensors are laid out ``N x C x H x W``; token tensors are
``N x C x L`` (channel-first, so a token map reshapes to a spatial map
without copying).
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .tensor import Tensor, as_tensor, default_dtype


def _const(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor._wrap(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Tensor._wrap(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._wrap(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _const(a, b if isinstance(b, Tensor) else None)
    b = _const(b, a)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._wrap(out, (a, b), backward, "div")


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p

    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return Tensor._wrap(out, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._wrap(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    return Tensor._wrap(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._wrap(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._wrap(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._wrap(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._wrap(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU (smooth everywhere, which keeps FD checks clean)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._wrap(out, (a,), backward, "gelu")


def clamp_probability(a: Tensor, eps: float = 1e-6) -> Tensor:
    lo, hi = eps, 1.0 - eps
    mask = (a.data > lo) & (a.data < hi)
    return Tensor._wrap(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clamp")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._wrap(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return Tensor._wrap(np.asarray(out), (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._wrap(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return Tensor._wrap(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._wrap(np.array(out), (a,), backward, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != axis
        ):
            raise ValueError(f"concat shape mismatch on axis {axis}: {ref.shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._wrap(out, tensors, backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    return concat([expand_dims(t, axis) for t in tensors], axis=axis)


def expand_dims(a: Tensor, axis: int) -> Tensor:
    out = np.expand_dims(a.data, axis)
    return Tensor._wrap(out, (a,), lambda g: (g.reshape(a.shape),), "expand_dims")


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()
    return Tensor._wrap(out, (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast_to")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._wrap(out, (a, b), backward, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._wrap(out, (a,), backward, "softmax")


def layer_norm(a: Tensor, axis: int, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over a single axis, then apply an optional affine map.

    ``weight``/``bias`` must broadcast against ``a`` (e.g. ``C x 1 x 1``).
    """
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = g * xhat
        gxm = gx.mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    out = Tensor._wrap(xhat, (a,), backward, "layer_norm")
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out(size, k, stride, padding, dilation):
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0,
           dilation: int = 1, groups: int = 1) -> Tensor:
    """2-D cross-correlation.

    ``x`` is ``N x C_in x H x W`` (a 3-D ``C_in x H x W`` input is treated as
    a batch of one and returned 3-D); ``w`` is ``C_out x C_in/groups x k x k``.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = expand_dims(x, 0)
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d needs an odd square kernel, got {kh}x{kw}")
    if cin % groups or cout % groups:
        raise ValueError(f"groups={groups} must divide C_in={cin} and C_out={cout}")
    if cin_g * groups != cin:
        raise ValueError(f"weight expects {cin_g * groups} input channels, got {cin}")
    k = kh
    ho = _conv_out(h, k, stride, padding, dilation)
    wo = _conv_out(wd, k, stride, padding, dilation)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty for input {x.shape}")
    og = cout // groups

    if k == 1 and stride == 1 and padding == 0:
        cols = x.data.reshape(n, groups, cin_g, h * wd)
        wmat = w.data.reshape(groups, og, cin_g)
        out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)

        def backward(g):
            gg = g.reshape(n, groups, og, ho * wo)
            gx = np.matmul(np.swapaxes(wmat, -1, -2), gg).reshape(x.shape) if x.requires_grad else None
            gw = np.matmul(gg, np.swapaxes(cols, -1, -2)).sum(0).reshape(w.shape) if w.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
            return gx, gw, gb
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        span_h = stride * (ho - 1) + 1
        span_w = stride * (wo - 1) + 1
        patches = []
        for i in range(k):
            for j in range(k):
                r0, c0 = i * dilation, j * dilation
                patches.append(xp[:, :, r0:r0 + span_h:stride, c0:c0 + span_w:stride])
        # (N, C, k*k, Ho, Wo) -> (N, G, Cg*k*k, Ho*Wo)
        cols = np.stack(patches, axis=2).reshape(n, groups, cin_g * k * k, ho * wo)
        wmat = w.data.reshape(groups, og, cin_g * k * k)
        out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)

        def backward(g):
            gg = g.reshape(n, groups, og, ho * wo)
            gx = gw = gb = None
            if w.requires_grad:
                gw = np.matmul(gg, np.swapaxes(cols, -1, -2)).sum(0).reshape(w.shape)
            if x.requires_grad:
                gcols = np.matmul(np.swapaxes(wmat, -1, -2), gg).reshape(n, cin, k * k, ho, wo)
                gxp = np.zeros_like(xp)
                idx = 0
                for i in range(k):
                    for j in range(k):
                        r0, c0 = i * dilation, j * dilation
                        gxp[:, :, r0:r0 + span_h:stride, c0:c0 + span_w:stride] += gcols[:, :, idx]
                        idx += 1
                gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
            if b is not None and b.requires_grad:
                gb = g.sum(axis=(0, 2, 3))
            return gx, gw, gb

    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    parents = (x, w, b) if b is not None else (x, w)
    res = Tensor._wrap(out, parents, (lambda g: backward(g)[:len(parents)]), "conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """``N x C x H x W -> N x C x 1 x 1``."""
    return mean(x, axis=(-2, -1), keepdims=True)


def channel_mean(x: Tensor) -> Tensor:
    """``N x C x H x W -> N x 1 x H x W``."""
    return mean(x, axis=-3, keepdims=True)


@lru_cache(maxsize=256)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``n_out x n_in`` interpolation matrix, half-pixel centres."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    m.setflags(write=False)
    return m


@lru_cache(maxsize=256)
def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    if n_in % n_out:
        raise ValueError(f"area resize needs an integer factor, got {n_in}->{n_out}")
    f = n_in // n_out
    m = np.kron(np.eye(n_out), np.full((1, f), 1.0 / f))
    m.setflags(write=False)
    return m


def _separable_resize(x: Tensor, my: np.ndarray, mx: np.ndarray, op: str) -> Tensor:
    my = my.astype(x.dtype, copy=False)
    mx = mx.astype(x.dtype, copy=False)
    out = np.matmul(np.matmul(my, x.data), mx.T)

    def backward(g):
        return (np.matmul(np.matmul(my.T, g), mx),)

    return Tensor._wrap(out, (x,), backward, op)


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the last two axes (align_corners off)."""
    h, w = x.shape[-2:]
    if (h, w) == tuple(size):
        return x
    return _separable_resize(x, _bilinear_matrix(h, size[0]), _bilinear_matrix(w, size[1]), "resize_bilinear")


def resize_area(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Block-average downsampling by an integer factor."""
    h, w = x.shape[-2:]
    if (h, w) == tuple(size):
        return x
    return _separable_resize(x, _area_matrix(h, size[0]), _area_matrix(w, size[1]), "resize_area")


@lru_cache(maxsize=64)
def _edge_pad_matrix(n: int, p: int) -> np.ndarray:
    m = np.eye(n)[np.clip(np.arange(-p, n + p), 0, n - 1)]
    m.setflags(write=False)
    return m


def pad_edge(x: Tensor, p: int) -> Tensor:
    """Replicate-pad the last two axes by ``p`` on every side."""
    if p == 0:
        return x
    h, w = x.shape[-2:]
    return _separable_resize(x, _edge_pad_matrix(h, p), _edge_pad_matrix(w, p), "pad_edge")


def upsample2x(x: Tensor) -> Tensor:
    h, w = x.shape[-2:]
    return resize_bilinear(x, (2 * h, 2 * w))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy on logits (numerically stable)."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=logits.dtype)
    x = logits.data
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * (s - t),)

    return Tensor._wrap(out, (logits,), backward, "bce_with_logits")
