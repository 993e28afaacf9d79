"""Frozen hierarchical attention trunk with injected adapters, plus RGB-D fusion.

The trunk is a stand-in for a pretrained hierarchical ViT: four stages, each
a patch-merging step followed by a few global multi-head attention blocks
(most of the depth sits in the cheap low-resolution stages). Its weights are
randomly initialized and frozen; only the adapters in the query/value
projections train. RGB and depth share the trunk.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .moe_lora import DEPTH, RGB, GateStatistics, LoraMoeLayer, inject_into_attention
from .nn import ChannelNorm, Conv2d, Linear, Module, uniform_init
from .tensor import Tensor

FUSED = "fused"


@dataclass
class EncoderConfig:
    widths: tuple[int, ...] = (16, 32, 64, 128)
    heads: tuple[int, ...] = (1, 2, 2, 4)
    input_size: int = 64
    rank: int = 4
    top_k: int = 2
    adapter: str = "moe"  # "moe" | "lora" | "none"
    depths: tuple[int, ...] = (1, 1, 2, 4)
    mlp_ratio: int = 4
    strides: tuple[int, ...] = field(default=(4, 8, 16, 32), init=False)

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.heads = tuple(self.heads)
        self.depths = tuple(self.depths)
        if len(self.widths) != 4 or len(self.heads) != 4 or len(self.depths) != 4:
            raise ValueError("encoder needs exactly four stages")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError(f"stage widths must strictly increase, got {self.widths}")
        for c, h in zip(self.widths, self.heads):
            if c % h:
                raise ValueError(f"width {c} not divisible by {h} heads")
        if min(self.depths) < 1:
            raise ValueError(f"every stage needs at least one block, got {self.depths}")
        if self.input_size % 32:
            raise ValueError(f"input size must be divisible by 32, got {self.input_size}")


@dataclass
class FeaturePyramid:
    levels: list[Tensor]
    modality: str

    def __post_init__(self):
        if len(self.levels) != 4:
            raise ValueError(f"a feature pyramid has 4 levels, got {len(self.levels)}")

    def __getitem__(self, i: int) -> Tensor:
        return self.levels[i]

    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.levels]


class FrozenLinear(Linear):
    def forward(self, x: Tensor, **_) -> Tensor:
        return super().forward(x)


class AttentionBlock(Module):
    """Pre-norm global multi-head self-attention + MLP on ``N x C x L`` tokens."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.heads = heads
        self.norm1 = ChannelNorm(dim, spatial_dims=1)
        self.q_proj = FrozenLinear(dim, dim, rng)
        self.k_proj = FrozenLinear(dim, dim, rng)
        self.v_proj = FrozenLinear(dim, dim, rng)
        self.o_proj = FrozenLinear(dim, dim, rng)
        self.norm2 = ChannelNorm(dim, spatial_dims=1)
        self.mlp_in = FrozenLinear(dim, dim * mlp_ratio, rng)
        self.mlp_out = FrozenLinear(dim * mlp_ratio, dim, rng)

    def forward(self, x: Tensor, hw, modality: str, stats: GateStatistics | None = None,
                bypass: bool = False) -> Tensor:
        n, c, n_tok = x.shape
        h = self.norm1(x)
        ctx = dict(modality=modality, spatial_shape=hw, stats=stats, bypass=bypass)
        q = self.q_proj(h, **ctx)
        k = self.k_proj(h)
        v = self.v_proj(h, **ctx)
        dh = c // self.heads
        q = F.reshape(q, (n, self.heads, dh, n_tok))
        k = F.reshape(k, (n, self.heads, dh, n_tok))
        v = F.reshape(v, (n, self.heads, dh, n_tok))
        scores = F.matmul(F.transpose(q, (0, 1, 3, 2)), k) * (1.0 / math.sqrt(dh))
        attn = F.softmax(scores, axis=-1)  # N x heads x Lq x Lk
        out = F.matmul(v, F.transpose(attn, (0, 1, 3, 2)))
        x = x + self.o_proj(F.reshape(out, (n, c, n_tok)))
        x = x + self.mlp_out(F.gelu(self.mlp_in(self.norm2(x))))
        return x


def space_to_depth(x: Tensor, f: int) -> Tensor:
    """``N x C x H x W`` -> ``N x C*f*f x H/f x W/f`` (non-overlapping f x f patches)."""
    n, c, h, w = x.shape
    x = F.reshape(x, (n, c, h // f, f, w // f, f))
    x = F.transpose(x, (0, 1, 3, 5, 2, 4))
    return F.reshape(x, (n, c * f * f, h // f, w // f))


class Stage(Module):
    """Patch merging (space-to-depth + 1x1 projection) followed by attention blocks."""

    def __init__(self, cin: int, cout: int, first: bool, heads: int, depth: int, mlp_ratio: int,
                 rng: np.random.Generator):
        self.factor = 4 if first else 2
        self.embed = Conv2d(cin * self.factor ** 2, cout, 1, rng)
        self.blocks = [AttentionBlock(cout, heads, mlp_ratio, rng) for _ in range(depth)]

    def forward(self, x: Tensor, modality: str, stats=None, bypass=False) -> Tensor:
        x = self.embed(space_to_depth(x, self.factor))
        n, c, h, w = x.shape
        tokens = F.reshape(x, (n, c, h * w))
        for block in self.blocks:
            tokens = block(tokens, (h, w), modality, stats, bypass)
        return F.reshape(tokens, (n, c, h, w))


class Encoder(Module):
    """Shared frozen trunk with modality-aware adapters in every q/v projection."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        chans = (3,) + cfg.widths
        self.stages = [
            Stage(chans[i], chans[i + 1], i == 0, cfg.heads[i], cfg.depths[i], cfg.mlp_ratio, rng)
            for i in range(4)
        ]
        self.freeze()
        for i, stage in enumerate(self.stages):
            for j, block in enumerate(stage.blocks):
                inject_into_attention(
                    block,
                    lambda w, b, attr, tag=f"stage{i + 1}.{j}": LoraMoeLayer(
                        w, b, cfg.rank, cfg.top_k, rng, mode=cfg.adapter, name=f"{tag}.{attr}"),
                )

    def adapters(self) -> list[LoraMoeLayer]:
        return [m for m in self.modules() if isinstance(m, LoraMoeLayer)]

    def adapter_parameters(self) -> list[Tensor]:
        out = []
        for layer in self.adapters():
            out.extend(layer.adapter_parameters())
        return out

    def trunk_parameters(self) -> list[Tensor]:
        adapter_ids = {id(p) for p in self.adapter_parameters()}
        return [p for p in self.parameters() if id(p) not in adapter_ids]

    def forward(self, image: Tensor, modality: str, stats: GateStatistics | None = None,
                bypass_adapters: bool = False) -> FeaturePyramid:
        return encode_modality(self, image, modality, stats, bypass_adapters)


def encode_modality(encoder: Encoder, image: Tensor, modality: str, stats: GateStatistics | None = None,
                    bypass_adapters: bool = False) -> FeaturePyramid:
    """One pass of ``image`` (``N x 3 x H x W`` or ``3 x H x W``) through the shared trunk."""
    if modality not in (RGB, DEPTH):
        raise ValueError(f"modality must be 'rgb' or 'depth', got {modality!r}")
    squeeze = image.ndim == 3
    if squeeze:
        image = F.expand_dims(image, 0)
    if image.shape[1] != 3:
        raise ValueError(f"encoder expects 3 input channels, got {image.shape[1]}")
    h, w = image.shape[-2:]
    if h % 32 or w % 32:
        raise ValueError(f"input size {h}x{w} must be divisible by 32")
    levels = []
    x = image
    for stage in encoder.stages:
        x = stage(x, modality, stats, bypass_adapters)
        levels.append(x)
    if squeeze:
        levels = [F.reshape(t, t.shape[1:]) for t in levels]
    return FeaturePyramid(levels, modality)


class UimLite(Module):
    """Cross-modal concat + 1x1 projection, modulated by a coarse prior map.

    The prior comes from the deepest concatenated level. Its gain
    ``2 * sigmoid(prior_logit)`` equals 1 when the prior head is zero.
    """

    def __init__(self, widths, rng: np.random.Generator):
        self.proj = [Conv2d(2 * c, c, 1, rng) for c in widths]
        self.prior_head = Conv2d(2 * widths[-1], 1, 3, rng)

    def set_averaging(self) -> None:
        """Initialize every projection to ``(rgb + depth) / 2`` and the prior to neutral."""
        for conv in self.proj:
            c = conv.weight.shape[0]
            w = np.zeros(conv.weight.shape)
            for i in range(c):
                w[i, i, 0, 0] = 0.5
                w[i, c + i, 0, 0] = 0.5
            conv.weight.data[...] = w
            conv.bias.data[...] = 0
        self.prior_head.weight.data[...] = 0
        self.prior_head.bias.data[...] = 0

    def forward(self, rgb: FeaturePyramid, depth: FeaturePyramid) -> list[Tensor]:
        deepest = F.concat([rgb[3], depth[3]], axis=1)
        prior_logit = self.prior_head(deepest)
        out = []
        for i, conv in enumerate(self.proj):
            fused = conv(F.concat([rgb[i], depth[i]], axis=1))
            gain = F.sigmoid(F.resize_bilinear(prior_logit, fused.shape[-2:])) * 2.0
            out.append(fused * gain)
        return out


class RfbLite(Module):
    """Three narrow dilated 3x3 branches (1, 3, 5), concat, 1x1 projection, residual."""

    def __init__(self, c: int, rng: np.random.Generator, reduction: int = 4):
        cb = max(c // reduction, 4)
        self.branches = [Conv2d(c, cb, 3, rng, dilation=d) for d in (1, 3, 5)]
        self.proj = Conv2d(3 * cb, c, 1, rng, gain=0.5)

    def branch(self, x: Tensor) -> Tensor:
        return self.proj(F.concat([F.gelu(b(x)) for b in self.branches], axis=1))

    def forward(self, x: Tensor) -> Tensor:
        return x + self.branch(x)


class ModalityFusion(Module):
    def __init__(self, widths, rng: np.random.Generator):
        self.uim = UimLite(widths, rng)
        self.rfb = [RfbLite(c, rng) for c in widths]

    def forward(self, rgb: FeaturePyramid, depth: FeaturePyramid) -> FeaturePyramid:
        return fuse_modalities(self, rgb, depth)


def fuse_modalities(fusion: ModalityFusion, rgb: FeaturePyramid, depth: FeaturePyramid) -> FeaturePyramid:
    for i, (a, b) in enumerate(zip(rgb.levels, depth.levels)):
        if a.shape != b.shape:
            raise ValueError(f"level {i + 1} shape mismatch: {a.shape} vs {b.shape}")
    merged = fusion.uim(rgb, depth)
    return FeaturePyramid([rfb(m) for rfb, m in zip(fusion.rfb, merged)], FUSED)
