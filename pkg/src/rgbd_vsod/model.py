"""Full prompt-free RGB-D video pipeline and the per-clip driver."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .decoder import Decoder, DecoderOutputs
from .encoder import Encoder, EncoderConfig, FeaturePyramid, ModalityFusion
from .memory import GatedMLF, MemoryBank, MemoryDecoderState, PlainMLF, TemporalMemory
from .moe_lora import DEPTH, RGB, GateStatistics
from .nn import Module
from .tensor import Tensor

MEMORY_MODES = ("none", "mem", "mem+mlf")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_widths: tuple[int, ...] = (16, 24, 32, 48)
    memory_mode: str = "mem+mlf"
    mlf_levels: tuple[int, ...] = (2,)
    key_dim: int = 16
    value_dim: int = 16
    hidden: int = 16
    memory_size: int = 4
    detach_memory: bool = False

    def __post_init__(self):
        if self.memory_mode not in MEMORY_MODES:
            raise ValueError(f"memory_mode must be one of {MEMORY_MODES}, got {self.memory_mode!r}")
        if not set(self.mlf_levels) <= {1, 2, 3} or not self.mlf_levels:
            raise ValueError(f"mlf_levels must be a non-empty subset of (1, 2, 3), got {self.mlf_levels}")


@dataclass
class PredictionBundle:
    logits: Tensor  # N x 1 x H x W, input resolution
    decoder: DecoderOutputs
    attention: Tensor | None = None
    bank_tags: list = field(default_factory=list)

    @property
    def P(self) -> Tensor:
        return F.sigmoid(self.logits)


class SalientVideoModel(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        ew = cfg.encoder.widths
        self.encoder = Encoder(cfg.encoder, rng)
        self.fusion = ModalityFusion(ew, rng)
        self.decoder = Decoder(ew, cfg.decoder_widths, rng)
        if cfg.memory_mode == "mem+mlf":
            self.mlf = GatedMLF(ew, cfg.decoder_widths, rng, decoder_levels=cfg.mlf_levels)
        elif cfg.memory_mode == "mem":
            self.mlf = PlainMLF(ew, cfg.decoder_widths, decoder_levels=cfg.mlf_levels)
        else:
            self.mlf = None
        if self.mlf is not None:
            self.memory = TemporalMemory(self.mlf.out_channels, rng, cfg.key_dim, cfg.value_dim,
                                         cfg.hidden, detach=cfg.detach_memory)
        else:
            self.memory = None

    def adapter_parameters(self) -> list[Tensor]:
        return [p for p in self.encoder.adapter_parameters() if p.requires_grad]

    def other_parameters(self) -> list[Tensor]:
        adapter = {id(p) for p in self.adapter_parameters()}
        return [p for p in self.trainable_parameters() if id(p) not in adapter]

    def frame(self, rgb: Tensor, depth: Tensor, stats: GateStatistics | None = None) -> tuple[FeaturePyramid, DecoderOutputs]:
        pr = self.encoder(rgb, RGB, stats)
        pd = self.encoder(depth, DEPTH, stats)
        fused = self.fusion(pr, pd)
        return fused, self.decoder(fused)


def _frames(arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5:
        raise ValueError(f"clip frames must be T x C x H x W or N x T x C x H x W, got {arr.shape}")
    return arr


def process_clip(model: SalientVideoModel, clip, stats: GateStatistics | None = None,
                 memory_size: int | None = None) -> list[PredictionBundle]:
    """Run a clip frame by frame without any prompt.

    Frame 0 seeds the memory from its own coarse mask; every frame then reads
    the memory, decodes its mask and writes itself back.
    """
    rgb = _frames(clip.rgb)
    depth = _frames(clip.depth)
    if rgb.shape != depth.shape:
        raise ValueError(f"rgb {rgb.shape} and depth {depth.shape} disagree")
    n_frames = rgb.shape[1]
    if n_frames < 1:
        raise ValueError("clip needs at least one frame")
    size = rgb.shape[-2:]
    cfg = model.cfg
    bank = MemoryBank(memory_size or cfg.memory_size)
    state = MemoryDecoderState()
    bundles = []
    for t in range(n_frames):
        fused, dec = model.frame(Tensor(rgb[:, t]), Tensor(depth[:, t]), stats)
        if model.memory is None:
            bundles.append(PredictionBundle(F.resize_bilinear(dec.coarse[0], size), dec))
            continue
        fs = model.mlf(fused, dec.features)
        q = model.memory.query(fs.x_f)
        if t == 0:
            pseudo = F.sigmoid(F.resize_bilinear(dec.coarse[0], fs.x_f.shape[-2:]))
            model.memory.pseudo_init(bank, fs.x_f, pseudo)
        read, attn = model.memory.read(bank, fs.x_f, q)
        logits, state = model.memory.decoder(fs.x_f, read, state)
        model.memory.write(bank, q, fs.x_f, F.sigmoid(logits), tag=t)
        bundles.append(PredictionBundle(F.resize_bilinear(logits, size), dec, attn, list(bank.tags)))
    model.last_bank = bank
    return bundles
