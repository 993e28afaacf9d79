"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x``.

    ``x.data`` is perturbed in place and restored afterwards.
    """
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f().data)
        flat[i] = orig - eps
        fm = float(f().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
    return float(np.max(np.abs(g_ad - g_fd) / denom)) if g_ad.size else 0.0


def finite_difference_check(f: Callable[[], Tensor], x: Tensor | Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` is a zero-argument closure returning a scalar tensor that depends on
    ``x`` (one tensor or several). All checked tensors should be float64.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    loss = f()
    if loss.size != 1:
        raise ValueError(f"finite_difference_check needs a scalar function, got shape {loss.shape}")
    loss.backward()
    worst = 0.0
    for t in xs:
        g_ad = t.grad if t.grad is not None else np.zeros_like(t.data)
        g_fd = numerical_gradient(f, t, eps)
        worst = max(worst, relative_error(g_ad, g_fd))
        t.grad = None
    return worst
