"""Pseudo-guided temporal memory.

Gated multi-level fusion builds the per-frame feature ``X_F``; the current
frame queries a FIFO bank of past (key, value) maps by scaled dot-product
attention; a convolutional gated recurrence turns ``X_F``, the read-out and
the previous hidden state into the frame's mask. Frame 0 has no history, so
the bank is seeded from the decoder's own coarse mask.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .encoder import FeaturePyramid
from .nn import Conv2d, Module
from .tensor import Tensor


@dataclass
class FusionState:
    x_c: Tensor
    x_e: Tensor
    gate: Tensor
    x_tilde_e: Tensor
    x_f: Tensor


class GatedMLF(Module):
    """Multi-level encoder aggregation with a learned shallow/enhanced gate."""

    def __init__(self, enc_widths, dec_widths, rng: np.random.Generator, decoder_levels=(2,),
                 hidden: int = 32):
        enc_widths = tuple(enc_widths)
        c1 = enc_widths[0]
        self.decoder_levels = tuple(decoder_levels)
        self.compress_in = Conv2d(int(np.sum(enc_widths)), hidden, 1, rng)
        self.compress_out = Conv2d(hidden, c1, 1, rng)
        self.conv_sp = Conv2d(1, 1, 7, rng, padding=0)
        self.conv_ch = Conv2d(c1, c1, 1, rng)
        self.conv_gate = Conv2d(2 * c1, c1, 1, rng)
        self.ffn_in = Conv2d(c1, 2 * c1, 1, rng)
        self.ffn_out = Conv2d(2 * c1, c1, 1, rng)
        self.out_channels = c1 + int(np.sum([dec_widths[i - 1] for i in self.decoder_levels]))

    def ffn(self, x: Tensor) -> Tensor:
        return self.ffn_out(F.gelu(self.ffn_in(x)))

    def forward(self, pyramid: FeaturePyramid, decoder_features, gate_override: float | None = None) -> FusionState:
        levels = pyramid.levels if isinstance(pyramid, FeaturePyramid) else list(pyramid)
        if len(levels) != 4 or any(t is None for t in levels):
            raise ValueError("gated fusion needs all four encoder levels")
        x1 = levels[0]
        size = x1.shape[-2:]
        stacked = F.concat([F.resize_bilinear(t, size) for t in levels], axis=1)
        x_c = self.compress_out(F.gelu(self.compress_in(stacked)))
        spatial = F.sigmoid(self.conv_sp(F.pad_edge(F.channel_mean(x_c), 3)))  # N x 1 x H x W
        channel = F.sigmoid(self.conv_ch(F.global_avg_pool(x_c)))  # N x C x 1 x 1
        x_e = spatial * (channel * x_c)
        if gate_override is None:
            gate = F.sigmoid(self.conv_gate(F.concat([x1, x_e], axis=1)))
        else:
            gate = Tensor(np.full(x_e.shape, gate_override), dtype=x_e.dtype)
        x_tilde = self.ffn(gate * x_e + (1.0 - gate) * x1)
        dec = [F.resize_bilinear(decoder_features[i - 1], size) for i in self.decoder_levels]
        x_f = F.concat([x_tilde] + dec, axis=1)
        return FusionState(x_c, x_e, gate, x_tilde, x_f)


def gated_mlf(module: GatedMLF, pyramid: FeaturePyramid, x_d2: Tensor) -> FusionState:
    """Fuse a pyramid with ``X_D^2`` (the module must use decoder level 2)."""
    if module.decoder_levels != (2,):
        raise ValueError("gated_mlf() takes X_D^2 only; call the module with all decoder features")
    return module(pyramid, [None, x_d2, None, None])


class PlainMLF(Module):
    """Fusion without multi-level gating: ``concat(X_E^1, X_D^2)``."""

    def __init__(self, enc_widths, dec_widths, decoder_levels=(2,)):
        self.decoder_levels = tuple(decoder_levels)
        self.out_channels = enc_widths[0] + int(np.sum([dec_widths[i - 1] for i in self.decoder_levels]))

    def forward(self, pyramid: FeaturePyramid, decoder_features, gate_override=None) -> FusionState:
        x1 = pyramid.levels[0]
        size = x1.shape[-2:]
        dec = [F.resize_bilinear(decoder_features[i - 1], size) for i in self.decoder_levels]
        x_f = F.concat([x1] + dec, axis=1)
        return FusionState(x1, x1, None, x1, x_f)


class MemoryBank:
    """FIFO of at most ``capacity`` (key, value) maps, each ``N x d x H x W``.

    Every entry carries a tag (frame index, or ``"pseudo"``) for tracing.
    """

    def __init__(self, capacity: int = 4):
        if capacity < 1:
            raise ValueError("memory capacity must be positive")
        self.capacity = capacity
        self._entries: deque = deque()
        self.evicted: list = []

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def keys(self) -> list[Tensor]:
        return [e[0] for e in self._entries]

    @property
    def values(self) -> list[Tensor]:
        return [e[1] for e in self._entries]

    @property
    def tags(self) -> list:
        return [e[2] for e in self._entries]

    def append(self, key: Tensor, value: Tensor, tag=None) -> None:
        if self._entries:
            k0, v0, _ = self._entries[0]
            if key.shape[0] != k0.shape[0] or key.shape[2:] != k0.shape[2:] or value.shape[1] != v0.shape[1]:
                raise ValueError(f"memory entry shape mismatch: {key.shape}/{value.shape} vs {k0.shape}/{v0.shape}")
        self._entries.append((key, value, tag))
        while len(self._entries) > self.capacity:
            self.evicted.append(self._entries.popleft()[2])

    def clear(self) -> None:
        self._entries.clear()
        self.evicted.clear()


def memory_attention(q: Tensor, keys: list[Tensor], values: list[Tensor]) -> tuple[Tensor, Tensor]:
    """Scaled dot-product read.

    ``q`` is ``N x d x H x W``; every stored token of every entry is attended.
    Returns the read-out (``N x d_v x H x W``) and the attention weights
    (``N x L_query x (entries * L_key)``).
    """
    if not keys:
        raise ValueError("memory bank is empty; initialize it before reading")
    n, d, h, w = q.shape
    qt = F.transpose(F.reshape(q, (n, d, h * w)), (0, 2, 1))  # N x Lq x d
    k = F.concat([F.reshape(t, (t.shape[0], t.shape[1], -1)) for t in keys], axis=2)  # N x d x M*L
    v = F.concat([F.reshape(t, (t.shape[0], t.shape[1], -1)) for t in values], axis=2)  # N x dv x M*L
    if k.shape[1] != d:
        raise ValueError(f"query dim {d} != key dim {k.shape[1]}")
    attn = F.softmax(F.matmul(qt, k) * (1.0 / math.sqrt(d)), axis=-1)
    out = F.matmul(v, F.transpose(attn, (0, 2, 1)))  # N x dv x Lq
    return F.reshape(out, (n, v.shape[1], h, w)), attn


@dataclass
class MemoryDecoderState:
    h: Tensor | None = None
    t: int = 0


class MemoryDecoder(Module):
    """Convolutional gated recurrence producing mask logits."""

    def __init__(self, cin: int, value_dim: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.update = Conv2d(cin + value_dim + hidden, hidden, 3, rng)
        self.candidate = Conv2d(cin + value_dim + hidden, hidden, 3, rng)
        self.head = Conv2d(hidden, 1, 1, rng)

    def forward(self, x_f: Tensor, x_read: Tensor, state: MemoryDecoderState,
                force_update: float | None = None) -> tuple[Tensor, MemoryDecoderState]:
        n, _, h, w = x_f.shape
        if x_read.shape[0] != n or x_read.shape[-2:] != (h, w):
            raise ValueError(f"read-out {x_read.shape} not aligned with features {x_f.shape}")
        prev = state.h
        if prev is None:
            prev = Tensor(np.zeros((n, self.hidden, h, w)), dtype=x_f.dtype)
        elif prev.shape != (n, self.hidden, h, w):
            raise ValueError(f"hidden state shape {prev.shape} drifted from {(n, self.hidden, h, w)}")
        inp = F.concat([x_f, x_read, prev], axis=1)
        if force_update is None:
            z = F.sigmoid(self.update(inp))
        else:
            z = Tensor(np.full((n, self.hidden, h, w), force_update), dtype=x_f.dtype)
        cand = F.tanh(self.candidate(inp))
        h_new = (1.0 - z) * prev + z * cand
        logits = self.head(h_new)
        return logits, MemoryDecoderState(h_new, state.t + 1)


class TemporalMemory(Module):
    """Query/key projection, value encoder and memory decoder.

    The value encoder is the single projection used both for regular writes
    and for pseudo initialization; the query projection doubles as the key
    projection.
    """

    def __init__(self, feat_channels: int, rng: np.random.Generator, key_dim: int = 16,
                 value_dim: int = 16, hidden: int = 16, detach: bool = False):
        self.query_proj = Conv2d(feat_channels, key_dim, 1, rng)
        self.value_encoder = Conv2d(feat_channels, value_dim, 1, rng)
        self.decoder = MemoryDecoder(feat_channels, value_dim, hidden, rng)
        self.detach = detach

    @property
    def key_proj(self) -> Conv2d:
        return self.query_proj

    @property
    def value_proj(self) -> Conv2d:
        return self.value_encoder

    def query(self, x_f: Tensor) -> Tensor:
        return self.query_proj(x_f)

    def encode_value(self, x_f: Tensor, p: Tensor) -> Tensor:
        if p.shape[0] != x_f.shape[0] or p.shape[-2:] != x_f.shape[-2:]:
            raise ValueError(f"mask {p.shape} does not match features {x_f.shape}")
        return self.value_encoder(x_f * p)

    def read(self, bank: MemoryBank, x_f: Tensor, q: Tensor | None = None) -> tuple[Tensor, Tensor]:
        q = self.query(x_f) if q is None else q
        return memory_attention(q, bank.keys, bank.values)

    def write(self, bank: MemoryBank, q_t: Tensor, x_f_t: Tensor, p_t: Tensor, tag=None) -> MemoryBank:
        if np.any(p_t.data < 0) or np.any(p_t.data > 1):
            raise ValueError("mask values must lie in [0, 1]")
        key, value = q_t, self.encode_value(x_f_t, p_t)
        if self.detach:
            key, value = key.detach(), value.detach()
        bank.append(key, value, tag)
        return bank

    def pseudo_init(self, bank: MemoryBank, x_f0: Tensor, p_c0: Tensor) -> MemoryBank:
        if len(bank):
            raise ValueError("pseudo initialization needs an empty memory bank")
        if np.any(p_c0.data < 0) or np.any(p_c0.data > 1):
            raise ValueError("pseudo mask must be a probability map")
        key = self.query_proj(x_f0)
        value = self.encode_value(x_f0, p_c0)
        if self.detach:
            key, value = key.detach(), value.detach()
        bank.append(key, value, "pseudo")
        return bank


def memory_read(memory: TemporalMemory, bank: MemoryBank, x_f: Tensor) -> Tensor:
    return memory.read(bank, x_f)[0]


def memory_write(memory: TemporalMemory, bank: MemoryBank, q_t: Tensor, x_f_t: Tensor, p_t: Tensor,
                 tag=None) -> MemoryBank:
    return memory.write(bank, q_t, x_f_t, p_t, tag)


def pseudo_init(memory: TemporalMemory, bank: MemoryBank, x_f0: Tensor, p_c0: Tensor) -> MemoryBank:
    return memory.pseudo_init(bank, x_f0, p_c0)


def memory_decode(memory: TemporalMemory, x_f: Tensor, x_read: Tensor, state: MemoryDecoderState,
                  output_size=None, force_update: float | None = None) -> tuple[Tensor, MemoryDecoderState]:
    """One recurrent step; returns the mask probability (upsampled to ``output_size``) and the new state."""
    logits, new_state = memory.decoder(x_f, x_read, state, force_update)
    if output_size is not None:
        logits = F.resize_bilinear(logits, output_size)
    return F.sigmoid(logits), new_state
