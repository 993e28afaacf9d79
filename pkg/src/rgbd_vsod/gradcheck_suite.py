"""Registered finite-difference checks for the model's custom operations.

Every check builds a small float64 problem (at most 4 x 8 x 8 per input),
projects the op output onto a fixed random direction and compares the
autodiff gradient of every input and parameter against central differences.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from .decoder import DecoderOutputs
from .encoder import FeaturePyramid
from .gradcheck import finite_difference_check
from .losses import aux_loss, structure_loss
from .memory import (GatedMLF, MemoryBank, MemoryDecoderState, TemporalMemory, gated_mlf, memory_decode,
                     memory_read, memory_write, pseudo_init)
from .moe_lora import ExpertGroup, GateStatistics, LoraMoeLayer, load_balance_loss, moe_lora_forward
from .tensor import Tensor, precision

TOLERANCE = 1e-4
EPS = 1e-5


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0, scale, size=shape), requires_grad=True)


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    direction = Tensor(rng.normal(size=out.shape))
    return lambda y: F.sum(y * direction)


def _randomize(params, rng, scale=0.3) -> None:
    for p in params:
        p.data[...] = rng.normal(0, scale, size=p.shape)


def check_moe_lora_forward(rng) -> float:
    w0 = Tensor(rng.normal(0, 0.3, size=(16, 16)))
    b0 = Tensor(rng.normal(0, 0.1, size=(16, 1)))
    layer = LoraMoeLayer(w0, b0, rank=4, top_k=2, rng=rng)
    _randomize([layer.B] + [p for g in layer.groups.values() for p in g.parameters()], rng)
    x = _t(rng, 2, 16, 16)
    proj = _project(moe_lora_forward(layer, x, "rgb", (4, 4)), rng)
    worst = 0.0
    for modality in ("rgb", "depth"):
        worst = max(worst, finite_difference_check(
            lambda m=modality: proj(moe_lora_forward(layer, x, m, (4, 4))),
            [x] + layer.adapter_parameters(), EPS))
    return worst


def check_gated_mlf(rng) -> float:
    widths = (4, 4, 4, 4)
    module = GatedMLF(widths, (4, 4, 4, 4), rng, hidden=4)
    levels = [_t(rng, 2, c, s, s) for c, s in zip(widths, (8, 4, 2, 1))]
    x_d2 = _t(rng, 2, 4, 4, 4)
    pyr = FeaturePyramid(levels, "fused")
    proj = _project(gated_mlf(module, pyr, x_d2).x_f, rng)
    return finite_difference_check(lambda: proj(gated_mlf(module, pyr, x_d2).x_f),
                                   levels + [x_d2] + module.parameters(), EPS)


def _memory(rng, c=4) -> TemporalMemory:
    return TemporalMemory(c, rng, key_dim=4, value_dim=4, hidden=4)


def _filled_bank(mem, rng, entries=2, c=4):
    bank = MemoryBank(4)
    keys = [_t(rng, 2, 4, 4, 4) for _ in range(entries)]
    vals = [_t(rng, 2, 4, 4, 4) for _ in range(entries)]
    for i, (k, v) in enumerate(zip(keys, vals)):
        bank.append(k, v, i)
    return bank, keys, vals


def check_memory_read(rng) -> float:
    mem = _memory(rng)
    bank, keys, vals = _filled_bank(mem, rng)
    x_f = _t(rng, 2, 4, 4, 4)
    proj = _project(memory_read(mem, bank, x_f), rng)
    return finite_difference_check(lambda: proj(memory_read(mem, bank, x_f)),
                                   [x_f] + keys + vals + mem.query_proj.parameters(), EPS)


def check_memory_write(rng) -> float:
    mem = _memory(rng)
    x_t = _t(rng, 2, 4, 4, 4)
    p_t = Tensor(rng.uniform(0.1, 0.9, size=(2, 1, 4, 4)), requires_grad=True)
    x_q = _t(rng, 2, 4, 4, 4)

    def f():
        bank, _, _ = _filled_bank(mem, np.random.default_rng(1))
        memory_write(mem, bank, mem.query(x_t), x_t, p_t, tag=2)
        return F.sum(memory_read(mem, bank, x_q) * direction)

    direction = Tensor(rng.normal(size=(2, 4, 4, 4)))
    return finite_difference_check(f, [x_t, p_t, x_q] + mem.query_proj.parameters()
                                   + mem.value_encoder.parameters(), EPS)


def check_pseudo_init(rng) -> float:
    mem = _memory(rng)
    x0 = _t(rng, 2, 4, 4, 4)
    p0 = Tensor(rng.uniform(0.1, 0.9, size=(2, 1, 4, 4)), requires_grad=True)
    x1 = _t(rng, 2, 4, 4, 4)
    direction = Tensor(rng.normal(size=(2, 4, 4, 4)))

    def f():
        bank = pseudo_init(mem, MemoryBank(4), x0, p0)
        return F.sum(memory_read(mem, bank, x1) * direction)

    return finite_difference_check(f, [x0, p0, x1] + mem.value_encoder.parameters()
                                   + mem.query_proj.parameters(), EPS)


def check_memory_decode(rng) -> float:
    mem = _memory(rng)
    x_f = _t(rng, 2, 4, 4, 4)
    x_r = _t(rng, 2, 4, 4, 4)
    h = _t(rng, 2, 4, 4, 4)
    direction = Tensor(rng.normal(size=(2, 1, 8, 8)))

    def f():
        p, st = memory_decode(mem, x_f, x_r, MemoryDecoderState(h, 1), output_size=(8, 8))
        return F.sum(p * direction) + F.sum(st.h * st.h) * 0.1

    return finite_difference_check(f, [x_f, x_r, h] + mem.decoder.parameters(), EPS)


def check_structure_loss(rng) -> float:
    logits = _t(rng, 2, 1, 8, 8, scale=2.0)
    gt = (rng.uniform(size=(2, 1, 8, 8)) > 0.5).astype(np.float64)
    return finite_difference_check(lambda: structure_loss(logits, gt), logits, EPS)


def check_aux_loss(rng) -> float:
    coarse = [_t(rng, 2, 1, s, s, scale=2.0) for s in (8, 4, 2)]
    edges = [_t(rng, 2, 1, s, s, scale=2.0) for s in (8, 4, 2)]
    gt = np.zeros((2, 1, 8, 8))
    gt[:, :, 2:6, 1:5] = 1
    dec = DecoderOutputs([], coarse, edges)
    return finite_difference_check(lambda: aux_loss(dec, gt), coarse + edges, EPS)


def check_load_balance_loss(rng) -> float:
    group = ExpertGroup(4, 2, rng)
    _randomize(group.gate.parameters(), rng, 1.0)
    z = _t(rng, 4, 4, 4, 4)

    def f():
        stats = GateStatistics()
        group(z, stats, key="g")
        return load_balance_loss(stats, 1e-2)

    return finite_difference_check(f, [z] + group.gate.parameters(), EPS)


REGISTRY: dict[str, Callable[[np.random.Generator], float]] = {
    "moe_lora_forward": check_moe_lora_forward,
    "gated_mlf": check_gated_mlf,
    "memory_read": check_memory_read,
    "memory_write": check_memory_write,
    "pseudo_init": check_pseudo_init,
    "memory_decode": check_memory_decode,
    "structure_loss": check_structure_loss,
    "aux_loss": check_aux_loss,
    "load_balance_loss": check_load_balance_loss,
}


@dataclass
class CheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < TOLERANCE


def run_all(seed: int = 0, names=None) -> list[CheckResult]:
    results = []
    with precision(np.float64):
        for name in names or REGISTRY:
            err = REGISTRY[name](np.random.default_rng([seed, len(results)]))
            results.append(CheckResult(name, err))
    return results


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'op':<20} {'max_rel_error':>14}  status"]
    for r in results:
        lines.append(f"{r.name:<20} {r.max_rel_error:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)


@contextlib.contextmanager
def sign_flipped_backward(op: str):
    """Test fixture: make ``functional.<op>`` pass back the negated gradient."""
    original = getattr(F, op)

    def broken(*args, **kwargs):
        out = original(*args, **kwargs)
        return Tensor._wrap(out.data, (out,), lambda g: (-g,), f"{op}_flipped")

    setattr(F, op, broken)
    try:
        yield
    finally:
        setattr(F, op, original)
