"""U-shaped decoder with per-level coarse-mask and edge heads.

Level 1 is the finest (stride 4), level 4 the coarsest (stride 32).
Heads exist on levels 1-3 only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .encoder import FeaturePyramid
from .nn import ChannelNorm, Conv2d, Module
from .tensor import Tensor


@dataclass
class DecoderOutputs:
    features: list[Tensor]  # X_D^1..X_D^4
    coarse: list[Tensor]  # P_c^1..P_c^3 logits, N x 1 x H_i x W_i
    edges: list[Tensor]  # P_e^1..P_e^3 logits


class ConvBlock(Module):
    """Two (3x3 conv, channel norm, GELU) layers."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.norm1 = ChannelNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.norm2 = ChannelNorm(cout)

    def forward(self, x: Tensor) -> Tensor:
        x = F.gelu(self.norm1(self.conv1(x)))
        return F.gelu(self.norm2(self.conv2(x)))


class Decoder(Module):
    def __init__(self, enc_widths, dec_widths, rng: np.random.Generator):
        enc_widths, dec_widths = tuple(enc_widths), tuple(dec_widths)
        self.top = Conv2d(enc_widths[3], dec_widths[3], 3, rng)
        # blocks[i] produces level i+1 for i = 0..2
        self.blocks = [ConvBlock(dec_widths[i + 1] + enc_widths[i], dec_widths[i], rng) for i in range(3)]
        self.coarse_heads = [Conv2d(dec_widths[i], 1, 1, rng) for i in range(3)]
        self.edge_heads = [Conv2d(dec_widths[i], 1, 1, rng) for i in range(3)]

    def forward(self, pyramid: FeaturePyramid) -> DecoderOutputs:
        return decode(self, pyramid)


def decode(decoder: Decoder, pyramid: FeaturePyramid) -> DecoderOutputs:
    levels = getattr(pyramid, "levels", pyramid)
    if len(levels) != 4 or any(t is None for t in levels):
        raise ValueError("decoder needs a complete 4-level pyramid")
    feats: list[Tensor | None] = [None] * 4
    feats[3] = F.gelu(decoder.top(levels[3]))
    for i in (2, 1, 0):
        up = F.upsample2x(feats[i + 1])
        feats[i] = decoder.blocks[i](F.concat([up, levels[i]], axis=1))
    coarse = [decoder.coarse_heads[i](feats[i]) for i in range(3)]
    edges = [decoder.edge_heads[i](feats[i]) for i in range(3)]
    return DecoderOutputs(feats, coarse, edges)
