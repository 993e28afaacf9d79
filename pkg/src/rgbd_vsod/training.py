"""Training loop, evaluation, inference and ablation studies."""
from __future__ import annotations

import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from . import functional as F
from . import pnm
from .config import MODEL_KEYS, RunConfig, parse_config
from .data import (ClipCache, ClipSampler, VideoClip, batch_clips, flip_clip, load_clip, pseudo_depth,
                   read_manifest)
from .losses import clip_loss
from .metrics import MetricReport, evaluate_frame, mean_report
from .model import SalientVideoModel, process_clip
from .moe_lora import GateStatistics
from .optim import AdamW, clip_grad_norm
from .tensor import NonFiniteError, Tensor, no_grad

LOG_HEADER = "step,L_total,L_pred,L_aux,L_moe"


class NumericFailure(RuntimeError):
    """Training produced a non-finite value; ``components`` holds the last known losses."""

    def __init__(self, message: str, components: dict):
        super().__init__(message)
        self.components = components


class TrunkModified(RuntimeError):
    pass


def build_model(cfg: RunConfig) -> SalientVideoModel:
    return SalientVideoModel(cfg.model_config(), np.random.default_rng(cfg.seed))


@dataclass
class ParameterAudit:
    adapter: int
    other: int
    frozen: int

    @property
    def ratio(self) -> float:
        return (self.adapter + self.other) / max(self.frozen, 1)

    def summary(self) -> str:
        return (f"trainable {self.adapter + self.other} (adapters {self.adapter}, other {self.other}) / "
                f"frozen trunk {self.frozen} = {self.ratio:.3f}")


def audit_parameters(model: SalientVideoModel) -> ParameterAudit:
    size = lambda ps: int(sum(p.data.size for p in ps))  # noqa: E731
    frozen = [p for p in model.parameters() if not p.requires_grad]
    return ParameterAudit(size(model.adapter_parameters()), size(model.other_parameters()), size(frozen))


def make_optimizer(model: SalientVideoModel, cfg: RunConfig) -> AdamW:
    return AdamW([{"params": model.adapter_parameters(), "lr": cfg.lr_adapter},
                  {"params": model.other_parameters(), "lr": cfg.lr_other}], weight_decay=cfg.weight_decay)


def format_log(step: int, values: dict) -> str:
    return f"{step},{values['L_total']:.6f},{values['L_pred']:.6f},{values['L_aux']:.6f},{values['L_moe']:.6f}"


class Trainer:
    """Stateful trainer. All randomness derives from ``cfg.seed`` and the step index."""

    def __init__(self, cfg: RunConfig, train_root=None):
        self.cfg = cfg
        root = train_root or cfg.train_root
        if not root or not Path(root).is_dir():
            raise FileNotFoundError(f"training data root not found: {root!r}")
        self.root = os.fspath(root)
        self.model = build_model(cfg)
        self.opt = make_optimizer(self.model, cfg)
        self.sampler = ClipSampler(read_manifest(self.root), cfg.clip_len, cfg.seed)
        self.cache = ClipCache(self.root, cfg.clip_len, cfg.input_size, cfg.depth_mode)
        self.step = 0
        self.history: list[dict] = []
        self._trunk = [(p, p.data.copy()) for p in self.model.parameters() if not p.requires_grad]

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.sampler) / self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        return self.cfg.steps if self.cfg.steps > 0 else self.cfg.epochs * self.steps_per_epoch

    def batch(self, step: int) -> VideoClip:
        clips = []
        for j, (seq, start) in enumerate(self.sampler.batch(step, self.cfg.batch_size)):
            clip = self.cache.get(seq, start)
            if self.cfg.flip_augment and np.random.default_rng([self.cfg.seed, step, j]).random() < 0.5:
                clip = flip_clip(clip)
            clips.append(clip)
        return batch_clips(clips)

    def train_step(self) -> dict:
        clip = self.batch(self.step)
        last = self.history[-1] if self.history else {}
        stats = GateStatistics()
        try:
            bundles = process_clip(self.model, clip, stats)
            losses = clip_loss(bundles, clip.gt, stats, self.cfg.lam)
            values = losses.values()
            if not all(math.isfinite(v) for v in values.values()):
                raise NumericFailure(f"non-finite loss at step {self.step}", values)
            self.opt.zero_grad()
            losses.total.backward()
        except NonFiniteError as exc:
            raise NumericFailure(f"step {self.step}: {exc}", dict(last)) from None
        values["grad_norm"] = clip_grad_norm(self.opt.params, self.cfg.grad_clip)
        if not math.isfinite(values["grad_norm"]):
            raise NumericFailure(f"non-finite gradient norm at step {self.step}", values)
        self.opt.step()
        self.step += 1
        self.history.append(values)
        return values

    def check_trunk(self) -> None:
        for p, snapshot in self._trunk:
            if not np.array_equal(p.data, snapshot):
                raise TrunkModified("frozen trunk parameters changed during training")

    def run(self, n_steps: int | None = None, log: Callable[[str], None] | None = None,
            ckpt_dir=None) -> list[dict]:
        end = self.total_steps if n_steps is None else self.step + n_steps
        while self.step < end:
            values = self.train_step()
            if log and (self.step % self.cfg.log_every == 0 or self.step == end):
                log(format_log(self.step, values))
            if self.step % self.steps_per_epoch == 0 or self.step == end:
                self.check_trunk()
                if ckpt_dir is not None:
                    self.save(Path(ckpt_dir) / f"epoch{math.ceil(self.step / self.steps_per_epoch):03d}.ckpt")
                    self.save(Path(ckpt_dir) / "last.ckpt")
        return self.history

    def capture(self) -> ckpt.Checkpoint:
        return ckpt.capture(self.model, self.cfg.to_text(), self.step, self.opt)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        ckpt.save(path, self.capture())

    @classmethod
    def resume(cls, path, train_root=None, cfg: RunConfig | None = None) -> "Trainer":
        """Continue from a checkpoint, optionally under a new schedule ``cfg``.

        ``cfg`` may change anything but the architecture fields.
        """
        c = ckpt.load(path)
        stored = parse_config(c.config_text, os.fspath(path), env=False)
        if cfg is not None:
            differ = stored.diff(cfg, MODEL_KEYS)
            if differ:
                raise ckpt.CheckpointError(f"cannot resume {path}: architecture fields differ: {', '.join(differ)}")
        trainer = cls(cfg or stored, train_root)
        ckpt.load_model_state(trainer.model, c.params)
        if c.opt_m is not None:
            ckpt.load_optimizer_state(trainer.model, trainer.opt, c.opt_t, c.opt_m, c.opt_v)
        trainer.step = c.step
        trainer._trunk = [(p, p.data.copy()) for p in trainer.model.parameters() if not p.requires_grad]
        return trainer


def load_model(path, expected: RunConfig | None = None) -> tuple[SalientVideoModel, RunConfig]:
    """Rebuild a model from a checkpoint; ``expected`` must agree on every architecture field."""
    c = ckpt.load(path)
    cfg = parse_config(c.config_text, os.fspath(path), env=False) if c.config_text else expected
    if cfg is None:
        raise ckpt.CheckpointError(f"{path}: no configuration stored and none supplied")
    if expected is not None:
        differ = cfg.diff(expected, MODEL_KEYS)
        if differ:
            detail = ", ".join(f"{k}: checkpoint={getattr(cfg, k)!r} config={getattr(expected, k)!r}" for k in differ)
            raise ckpt.CheckpointError(f"checkpoint/config mismatch in {detail}")
    model = build_model(cfg)
    ckpt.load_model_state(model, c.params)
    return model, cfg


def sequence_frames(root, sequence: str) -> int:
    rgb = Path(root) / sequence / "rgb"
    if not rgb.is_dir():
        raise FileNotFoundError(f"missing frame directory: {rgb}")
    return len(sorted(rgb.glob("*.ppm")))


def predict_sequence(model: SalientVideoModel, clip: VideoClip, memory_size: int) -> np.ndarray:
    """Prompt-free probabilities ``T x H x W`` for a whole sequence."""
    with no_grad():
        bundles = process_clip(model, clip, memory_size=memory_size)
    return np.stack([F.sigmoid(b.logits).data[0, 0] for b in bundles]).astype(np.float64)


@dataclass
class EvalResult:
    sequences: dict[str, MetricReport] = field(default_factory=dict)

    @property
    def frames(self) -> list[MetricReport]:
        return [r for rep in self.sequences.values() for r in rep.per_frame]

    @property
    def overall(self) -> MetricReport:
        return mean_report(self.frames)

    def lines(self) -> list[str]:
        out = []
        for seq, rep in self.sequences.items():
            out.extend(r.line(seq, i) for i, r in enumerate(rep.per_frame))
            out.append(rep.line(seq, "mean"))
        return out

    def table(self) -> str:
        o = self.overall
        return f"frames={len(self.frames)} E={o.E:.4f} S={o.S:.4f} maxF={o.F:.4f} meanF={o.mean_F:.4f} MAE={o.MAE:.4f}"


def evaluate(model: SalientVideoModel, root, cfg: RunConfig, predictor=None) -> EvalResult:
    """Per-frame metrics over every sequence under ``root`` (prompt-free, streaming memory)."""
    result = EvalResult()
    for seq, length in read_manifest(root).items():
        clip = load_clip(root, seq, 0, length, cfg.input_size)
        if cfg.depth_mode != "actual":
            clip = pseudo_depth(clip, cfg.depth_mode)
        probs = predictor(clip) if predictor else predict_sequence(model, clip, cfg.test_memory_size)
        reports = [evaluate_frame(p, g[0]) for p, g in zip(probs, clip.gt)]
        result.sequences[seq] = mean_report(reports)
    return result


def write_report(result: EvalResult, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(result.lines()) + "\n")


def infer_sequence(model: SalientVideoModel, cfg: RunConfig, seq_dir, out_dir) -> list[Path]:
    """Write one 8-bit PGM per frame at the sequence's native resolution."""
    seq_dir = Path(seq_dir)
    n = sequence_frames(seq_dir.parent, seq_dir.name)
    if n == 0:
        raise FileNotFoundError(f"no frames in {seq_dir / 'rgb'}")
    native = pnm.read(seq_dir / "rgb" / "0000.ppm").shape[:2]
    clip = load_clip(seq_dir.parent, seq_dir.name, 0, n, cfg.input_size)
    probs = predict_sequence(model, clip, cfg.test_memory_size)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, p in enumerate(probs):
        if p.shape != native:
            with no_grad():
                p = F.resize_bilinear(Tensor(p[None, None]), native).data[0, 0]
        img = np.clip(np.round(p * 255.0), 0, 255).astype(np.uint8)
        path = out_dir / f"{t:04d}.pgm"
        pnm.write(path, img)
        paths.append(path)
    return paths


STUDIES = {
    "topk": ("top_k", [1, 2, 3]),
    "cliplen": ("clip_len", [2, 4, 6]),
    "feature-level": ("mlf_levels", [(1,), (2,), (1, 2)]),
    "pseudo-depth": ("depth_mode", ["copy", "black", "actual"]),
    "memory": ("memory_mode", ["none", "mem", "mem+mlf"]),
}
ROW_NAMES = {
    "memory": {"none": "Baseline", "mem": "+Mem", "mem+mlf": "+Mem+Gated-MLF"},
    "pseudo-depth": {"copy": "Pseudo (Copy)", "black": "Pseudo (Black)", "actual": "Actual depth"},
    "feature-level": {(1,): "X_D^1", (2,): "X_D^2", (1, 2): "X_D^1+X_D^2"},
}


@dataclass
class AblationRow:
    name: str
    value: object
    report: MetricReport
    final_loss: float


def run_variant(cfg: RunConfig, log=None) -> tuple[Trainer, EvalResult]:
    trainer = Trainer(cfg)
    trainer.run(log=log)
    result = evaluate(trainer.model, cfg.val_root, cfg)
    return trainer, result


def ablate(cfg: RunConfig, study: str, log=None, values=None) -> list[AblationRow]:
    if study not in STUDIES:
        raise ValueError(f"unknown study {study!r}; choose from {sorted(STUDIES)}")
    key, axis = STUDIES[study]
    rows = []
    for v in values or axis:
        variant = cfg.replace(**{key: v})
        trainer, result = run_variant(variant)
        name = ROW_NAMES.get(study, {}).get(v, f"{key}={v}")
        rows.append(AblationRow(name, v, result.overall, trainer.history[-1]["L_total"]))
        if log:
            log(f"{name}: {result.table()}")
    return rows


def format_ablation(study: str, rows: list[AblationRow]) -> str:
    lines = [f"study: {study}", f"{'variant':<18} {'E':>7} {'S':>7} {'maxF':>7} {'MAE':>7} {'L_final':>8}"]
    for r in rows:
        o = r.report
        lines.append(f"{r.name:<18} {o.E:>7.4f} {o.S:>7.4f} {o.F:>7.4f} {o.MAE:>7.4f} {r.final_loss:>8.4f}")
    return "\n".join(lines)


def dump_failure(exc: NumericFailure, stream=None) -> None:
    stream = stream or sys.stderr
    print(f"numeric failure: {exc}", file=stream)
    for k, v in exc.components.items():
        print(f"  {k} = {v}", file=stream)
