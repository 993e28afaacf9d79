"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from .encoder import EncoderConfig
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    input_size: int = 64
    clip_len: int = 4
    rank: int = 4
    experts_per_group: int = 3
    top_k: int = 2
    lam: float = 1e-2
    lr_adapter: float = 1e-4
    lr_other: float = 1e-3
    weight_decay: float = 5e-4
    epochs: int = 5
    steps: int = 0  # >0 overrides epochs
    batch_size: int = 4
    seed: int = 7
    detach_memory: bool = False
    test_memory_size: int = 4
    grad_clip: float = 5.0
    flip_augment: bool = False
    adapter: str = "moe"
    memory_mode: str = "mem+mlf"
    mlf_levels: tuple = (2,)
    depth_mode: str = "actual"
    widths: tuple = (16, 32, 64, 128)
    heads: tuple = (1, 2, 2, 4)
    decoder_widths: tuple = (16, 24, 32, 48)
    train_root: str = ""
    val_root: str = ""
    out_dir: str = "runs"
    log_every: int = 1

    def __post_init__(self):
        for name in ("input_size", "clip_len", "rank", "experts_per_group", "top_k", "batch_size",
                     "test_memory_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lam", "lr_adapter", "lr_other", "weight_decay", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.experts_per_group != 3:
            raise ConfigError("exactly 3 experts per group are supported")
        if self.top_k > self.experts_per_group:
            raise ConfigError("top_k cannot exceed experts_per_group")
        if self.depth_mode not in ("actual", "copy", "black"):
            raise ConfigError(f"depth_mode must be actual/copy/black, got {self.depth_mode!r}")

    def model_config(self) -> ModelConfig:
        enc = EncoderConfig(widths=tuple(self.widths), heads=tuple(self.heads), input_size=self.input_size,
                            rank=self.rank, top_k=self.top_k, adapter=self.adapter)
        return ModelConfig(encoder=enc, decoder_widths=tuple(self.decoder_widths),
                           memory_mode=self.memory_mode, mlf_levels=tuple(self.mlf_levels),
                           memory_size=self.clip_len, detach_memory=self.detach_memory)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def diff(self, other: "RunConfig", keys=None) -> list[str]:
        names = keys or [f.name for f in fields(self)]
        return [n for n in names if getattr(self, n) != getattr(other, n)]


MODEL_KEYS = ("input_size", "rank", "experts_per_group", "top_k", "adapter", "memory_mode", "mlf_levels",
              "widths", "heads", "decoder_widths")


def _coerce(name: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    return raw


def parse_config(text: str, source: str = "<config>", env: bool = True) -> RunConfig:
    """Parse config text. With ``env``, a non-empty ``M4_SEED`` overrides the seed."""
    defaults = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, raw, getattr(defaults, key))
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    try:
        cfg = RunConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    seed = os.environ.get("M4_SEED") if env else None
    if seed is not None and seed.strip():
        cfg = cfg.replace(seed=int(seed))
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), os.fspath(path))
