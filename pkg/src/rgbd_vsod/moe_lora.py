"""Low-rank adapters with convolutional, modality-routed expert groups.

A :class:`LoraMoeLayer` wraps a frozen projection ``W0`` and computes::

    h = W0 x + B A x + B D(A x)

where ``D`` reshapes the rank-``r`` token features to an ``r x H x W`` map,
sends it to the expert groups active for the current modality, mixes the
top-K experts of each group with renormalized gate weights and sums the
groups.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import functional as F
from .nn import Conv2d, Module, uniform_init
from .tensor import Tensor

RGB = "rgb"
DEPTH = "depth"
FUSION = "fusion"
GROUPS = (RGB, DEPTH, FUSION)

# modality -> expert groups executed for it
ROUTES = {RGB: (RGB, FUSION), DEPTH: (DEPTH, FUSION)}


class Conv3x3Expert(Module):
    def __init__(self, r: int, rng: np.random.Generator):
        self.conv = Conv2d(r, r, 3, rng, bias=False)

    def forward(self, z: Tensor) -> Tensor:
        return self.conv(z)


class Conv5x5Expert(Module):
    def __init__(self, r: int, rng: np.random.Generator):
        self.conv = Conv2d(r, r, 5, rng, bias=False)

    def forward(self, z: Tensor) -> Tensor:
        return self.conv(z)


class DepthwisePointwiseExpert(Module):
    def __init__(self, r: int, rng: np.random.Generator):
        self.depthwise = Conv2d(r, r, 3, rng, groups=r, bias=False)
        self.pointwise = Conv2d(r, r, 1, rng, bias=False)

    def forward(self, z: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(z))


def top_k_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row; ties go to the lowest index."""
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def top_k_weights(logits: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
    """Softmax restricted to the top-k logits of each row (others exactly 0)."""
    mask = top_k_mask(logits.data, k)
    shifted = logits - Tensor(logits.data.max(axis=-1, keepdims=True), dtype=logits.dtype)
    e = F.exp(shifted) * mask.astype(logits.dtype)
    return e / F.sum(e, axis=-1, keepdims=True), mask


class GateNetwork(Module):
    """Linear scorer from the pooled low-rank map to per-expert logits."""

    def __init__(self, r: int, n_experts: int, k: int, rng: np.random.Generator):
        if not 1 <= k <= n_experts:
            raise ValueError(f"top-k must lie in [1, {n_experts}], got {k}")
        self.k = k
        self.weight = uniform_init(rng, (n_experts, r), r)
        self.bias = Tensor(np.zeros(n_experts), requires_grad=True)

    def logits(self, z: Tensor) -> Tensor:
        pooled = F.reshape(F.global_avg_pool(z), z.shape[:2])  # N x r
        return F.matmul(pooled, F.transpose(self.weight)) + self.bias

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor, np.ndarray]:
        logits = self.logits(z)
        weights, mask = top_k_weights(logits, self.k)
        return logits, weights, mask


def smooth_load(logits: Tensor, k: int, temperature: float = 1.0) -> Tensor:
    """Differentiable per-expert selection count.

    For expert ``e`` the threshold is the k-th largest logit among the other
    experts; ``sigmoid((logit_e - threshold) / temperature)`` is the soft
    indicator that ``e`` lands in the top k.
    """
    n, n_exp = logits.shape
    if k >= n_exp:
        return Tensor(np.full(n_exp, float(n)), dtype=logits.dtype)
    cols = []
    for e in range(n_exp):
        others = [j for j in range(n_exp) if j != e]
        ranked = np.argsort(-logits.data[:, others], axis=1, kind="stable")[:, k - 1]
        thr_idx = np.asarray(others)[ranked]
        thr = logits[np.arange(n), thr_idx]
        cols.append(F.sigmoid((logits[:, e] - thr) * (1.0 / temperature)))
    return F.sum(F.stack(cols, axis=1), axis=0)


@dataclass
class GateRecord:
    importance: Tensor  # per-expert sum of mixture weights
    load: Tensor  # smooth selection count (differentiable)
    hard_load: np.ndarray  # integer selection count (reporting)


@dataclass
class GateStatistics:
    """Importance/load accumulators, one record per gate network.

    Accumulation across forward passes is by addition.
    """

    records: dict[str, GateRecord] = field(default_factory=dict)

    def add(self, key: str, importance: Tensor, load: Tensor, hard_load: np.ndarray) -> None:
        if key in self.records:
            rec = self.records[key]
            self.records[key] = GateRecord(rec.importance + importance, rec.load + load,
                                           rec.hard_load + hard_load)
        else:
            self.records[key] = GateRecord(importance, load, hard_load.copy())

    def merge(self, other: "GateStatistics") -> "GateStatistics":
        out = GateStatistics(dict(self.records))
        for key, rec in other.records.items():
            out.add(key, rec.importance, rec.load, rec.hard_load)
        return out

    @classmethod
    def from_values(cls, importance, load) -> "GateStatistics":
        imp = importance if isinstance(importance, Tensor) else Tensor(importance)
        ld = load if isinstance(load, Tensor) else Tensor(load)
        stats = cls()
        stats.add("gate", imp, ld, np.asarray(ld.data).round().astype(np.int64))
        return stats

    def __len__(self) -> int:
        return len(self.records)

    def hard_counts(self) -> dict[str, np.ndarray]:
        return {k: r.hard_load for k, r in self.records.items()}


def cv_squared(v: Tensor) -> Tensor:
    """Squared coefficient of variation with population variance."""
    mu = F.mean(v)
    if float(mu.data) <= 0:
        raise ValueError("coefficient of variation needs a positive mean")
    var = F.mean((v - mu) ** 2)
    return var / (mu * mu)


def load_balance_loss(stats: GateStatistics, lam: float = 1e-2) -> Tensor:
    """``lam * (CV(I)^2 + CV(L)^2)``, averaged over gate networks."""
    if not stats.records:
        raise ValueError("load_balance_loss needs at least one gated batch")
    terms = [cv_squared(r.importance) + cv_squared(r.load) for r in stats.records.values()]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (lam / len(terms))


class ExpertGroup(Module):
    """Three convolutional experts mixed by their own top-K gate."""

    def __init__(self, r: int, k: int, rng: np.random.Generator):
        self.experts = [Conv3x3Expert(r, rng), Conv5x5Expert(r, rng), DepthwisePointwiseExpert(r, rng)]
        self.gate = GateNetwork(r, len(self.experts), k, rng)
        self.calls = 0
        self.expert_calls = [0, 0, 0]

    def forward(self, z: Tensor, stats: GateStatistics | None = None, key: str = "") -> Tensor:
        self.calls += 1
        logits, weights, mask = self.gate(z)
        out = None
        for e, expert in enumerate(self.experts):
            if not mask[:, e].any():
                continue
            self.expert_calls[e] += 1
            w = F.reshape(weights[:, e], (z.shape[0], 1, 1, 1))
            term = expert(z) * w
            out = term if out is None else out + term
        if stats is not None:
            stats.add(key, F.sum(weights, axis=0), smooth_load(logits, self.gate.k),
                      mask.sum(axis=0).astype(np.int64))
        return out


class LoraMoeLayer(Module):
    """Frozen projection plus low-rank adapter and modality-routed experts.

    ``W0`` (``d x k``) and the optional bias are shared with the wrapped
    projection and never trained. ``mode`` selects ``"moe"`` (full layer),
    ``"lora"`` (plain low-rank path) or ``"none"`` (frozen projection only).
    """

    def __init__(self, weight: Tensor, bias: Tensor | None, rank: int, top_k: int,
                 rng: np.random.Generator, mode: str = "moe", name: str = ""):
        d, k = weight.shape
        if rank > min(d, k) / 4:
            raise ValueError(f"rank {rank} exceeds min(d, k)/4 = {min(d, k) / 4}")
        if mode not in ("moe", "lora", "none"):
            raise ValueError(f"unknown adapter mode {mode!r}")
        weight.requires_grad = False
        if bias is not None:
            bias.requires_grad = False
        self.W0 = weight
        self.b0 = bias
        self.rank = rank
        self.mode = mode
        self.name = name
        bound = 1.0 / math.sqrt(k)
        self.A = Tensor(rng.uniform(-bound, bound, size=(rank, k)), requires_grad=True)
        self.B = Tensor(np.zeros((d, rank)), requires_grad=True)
        if mode == "moe":
            self.groups = {g: ExpertGroup(rank, top_k, rng) for g in GROUPS}
        else:
            self.groups = {}

    def frozen(self, x: Tensor) -> Tensor:
        out = F.matmul(self.W0, x)
        return out + self.b0 if self.b0 is not None else out

    def lora_forward(self, x: Tensor) -> Tensor:
        """``W0 x + B A x`` on ``N x k x L`` (or ``k x L``) tokens."""
        self._check(x)
        return self.frozen(x) + F.matmul(self.B, F.matmul(self.A, x))

    def forward(self, x: Tensor, modality: str | None = None, spatial_shape=None,
                stats: GateStatistics | None = None, bypass: bool = False) -> Tensor:
        if bypass or self.mode == "none":
            self._check(x)
            return self.frozen(x)
        if self.mode == "lora":
            return self.lora_forward(x)
        return self.moe_forward(x, modality, spatial_shape, stats)

    def moe_forward(self, x: Tensor, modality: str, spatial_shape,
                    stats: GateStatistics | None = None) -> Tensor:
        self._check(x)
        if modality not in ROUTES:
            raise ValueError(f"modality must be one of {sorted(ROUTES)}, got {modality!r}")
        squeeze = x.ndim == 2
        if squeeze:
            x = F.expand_dims(x, 0)
        n, _, n_tok = x.shape
        if spatial_shape is None:
            raise ValueError("moe_forward needs the (H, W) token layout")
        h, w = spatial_shape
        if h < 2 or w < 2:
            raise ValueError(f"spatial layout {spatial_shape} too small for convolutional experts")
        if h * w != n_tok:
            raise ValueError(f"{n_tok} tokens do not factor into spatial shape {spatial_shape}")
        z = F.matmul(self.A, x)  # N x r x L
        zmap = F.reshape(z, (n, self.rank, h, w))
        routed = None
        for group in ROUTES[modality]:
            out = self.groups[group](zmap, stats, key=f"{self.name}/{group}")
            routed = out if routed is None else routed + out
        low_rank = z + F.reshape(routed, (n, self.rank, n_tok))
        res = self.frozen(x) + F.matmul(self.B, low_rank)
        return F.reshape(res, res.shape[1:]) if squeeze else res

    def _check(self, x: Tensor) -> None:
        if x.shape[-2] != self.W0.shape[1]:
            raise ValueError(f"input feature dim {x.shape[-2]} != projection input dim {self.W0.shape[1]}")

    def adapter_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p is not self.W0 and p is not self.b0]

    def count_adapter_parameters(self) -> int:
        d, k = self.W0.shape
        r = self.rank
        n = r * k + d * r
        if self.mode == "moe":
            per_group = r * r * 9 + r * r * 25 + (r * 9 + r * r) + (3 * r + 3)
            n += len(GROUPS) * per_group
        return n


def moe_lora_forward(layer: LoraMoeLayer, x: Tensor, modality: str, spatial_shape,
                     stats: GateStatistics | None = None) -> Tensor:
    return layer.moe_forward(x, modality, spatial_shape, stats)


def lora_forward(layer: LoraMoeLayer, x: Tensor) -> Tensor:
    return layer.lora_forward(x)


def inject_into_attention(block, layer_factory: Callable[[Tensor, Tensor | None, str], LoraMoeLayer]):
    """Replace ``block.q_proj`` and ``block.v_proj`` by adapter wrappers.

    The wrappers reuse the block's frozen weight tensors; ``k_proj`` and
    ``o_proj`` are left untouched.
    """
    for attr in ("q_proj", "v_proj"):
        proj = getattr(block, attr)
        if isinstance(proj, LoraMoeLayer):
            continue
        setattr(block, attr, layer_factory(proj.weight, proj.bias, attr))
    return block
