"""AdamW with parameter groups and global-norm gradient clipping."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = float(np.sqrt(np.sum([np.sum(g.astype(np.float64) ** 2) for g in grads])))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class AdamW:
    """Decoupled weight decay Adam. ``groups`` is a list of ``{"params", "lr"}`` dicts."""

    def __init__(self, groups, weight_decay: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = [dict(g) for g in groups]
        seen = set()
        for g in self.groups:
            for p in g["params"]:
                if id(p) in seen:
                    raise ValueError("a parameter appears in more than one optimizer group")
                seen.add(id(p))
            g.setdefault("weight_decay", weight_decay)
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for g in self.groups for p in g["params"]}
        self.v = {id(p): np.zeros_like(p.data) for g in self.groups for p in g["params"]}

    @property
    def params(self) -> list[Tensor]:
        return [p for g in self.groups for p in g["params"]]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for g in self.groups:
            lr, wd = g["lr"], g["weight_decay"]
            for p in g["params"]:
                if p.grad is None:
                    continue
                m, v = self.m[id(p)], self.v[id(p)]
                m *= b1
                m += (1 - b1) * p.grad
                v *= b2
                v += (1 - b2) * p.grad * p.grad
                p.data *= (1 - lr * wd)
                p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
