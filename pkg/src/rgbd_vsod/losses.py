"""Training objective: structure loss, deep supervision with Sobel edges, MoE balance."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve, uniform_filter

from . import functional as F
from .decoder import DecoderOutputs
from .moe_lora import GateStatistics, load_balance_loss
from .tensor import Tensor

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


def _check_binary(gt: np.ndarray) -> None:
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground truth must be binary (0/1)")


def structure_weights(gt: np.ndarray) -> np.ndarray:
    """``1 + 5 |avgpool15(gt) - gt|`` with zero padding counted in the average."""
    pooled = uniform_filter(gt.astype(np.float64), size=(1,) * (gt.ndim - 2) + (15, 15), mode="constant")
    return 1.0 + 5.0 * np.abs(pooled - gt)


def structure_loss(pred_logits: Tensor, gt) -> Tensor:
    """Boundary-weighted BCE plus weighted soft IoU, averaged over the batch.

    ``pred_logits`` and ``gt`` are ``N x 1 x H x W`` (or ``1 x H x W``).
    """
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if gt.shape != pred_logits.shape:
        raise ValueError(f"prediction {pred_logits.shape} and target {gt.shape} differ in shape")
    _check_binary(gt)
    dtype = pred_logits.dtype
    w = structure_weights(gt).astype(dtype)
    gt = gt.astype(dtype)
    axes = (-2, -1)
    wsum = w.sum(axis=axes)
    wbce = F.sum(F.bce_with_logits(pred_logits, gt) * w, axis=axes) / wsum
    p = F.sigmoid(pred_logits)
    inter = F.sum(p * (gt * w), axis=axes)
    union = F.sum((p + gt) * w, axis=axes)
    wiou = 1.0 - (inter + 1.0) / (union - inter + 1.0)
    return F.mean(wbce + wiou)


def sobel_edges(gt: np.ndarray) -> np.ndarray:
    """Binary edge map from Sobel gradient magnitude (replicated border).

    Works on the last two axes; the magnitude is normalized by its per-map
    maximum and thresholded at 0.5.
    """
    gt = np.asarray(gt, dtype=np.float64)
    lead = gt.shape[:-2]
    maps = gt.reshape((-1,) + gt.shape[-2:])
    out = np.zeros_like(maps)
    for i, m in enumerate(maps):
        gx = convolve(m, SOBEL_X[::-1, ::-1], mode="nearest")
        gy = convolve(m, SOBEL_Y[::-1, ::-1], mode="nearest")
        mag = np.hypot(gx, gy)
        peak = mag.max()
        if peak > 0:
            out[i] = (mag / peak >= 0.5).astype(np.float64)
    return out.reshape(lead + gt.shape[-2:])


def downsample_mask(gt: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Area-average to ``size`` then threshold at 0.5."""
    h, w = gt.shape[-2:]
    fh, fw = h // size[0], w // size[1]
    if fh * size[0] != h or fw * size[1] != w:
        raise ValueError(f"cannot area-downsample {h}x{w} to {size}")
    blocks = gt.reshape(gt.shape[:-2] + (size[0], fh, size[1], fw)).mean(axis=(-3, -1))
    return (blocks >= 0.5).astype(np.float64)


@dataclass
class AuxBreakdown:
    total: Tensor
    coarse: list[Tensor] = field(default_factory=list)
    edge: list[Tensor] = field(default_factory=list)

    @property
    def terms(self) -> list[Tensor]:
        return self.coarse + self.edge


def aux_loss_terms(decoder: DecoderOutputs, gt) -> AuxBreakdown:
    gt = np.asarray(gt, dtype=np.float64)
    _check_binary(gt)
    coarse, edge = [], []
    for i in range(3):
        pc, pe = decoder.coarse[i], decoder.edges[i]
        gi = downsample_mask(gt, pc.shape[-2:])
        coarse.append(structure_loss(pc, gi))
        edge.append(F.mean(F.bce_with_logits(pe, sobel_edges(gi).astype(pe.dtype))))
    total = coarse[0]
    for t in coarse[1:] + edge:
        total = total + t
    return AuxBreakdown(total, coarse, edge)


def aux_loss(decoder: DecoderOutputs, gt) -> Tensor:
    """Sum over levels 1-3 of coarse structure loss plus edge BCE."""
    return aux_loss_terms(decoder, gt).total


@dataclass
class LossBreakdown:
    total: Tensor
    pred: Tensor
    aux: Tensor
    moe: Tensor
    aux_coarse: list[Tensor] = field(default_factory=list)
    aux_edge: list[Tensor] = field(default_factory=list)

    def values(self) -> dict[str, float]:
        return {"L_total": float(self.total.data), "L_pred": float(self.pred.data),
                "L_aux": float(self.aux.data), "L_moe": float(self.moe.data)}


def total_loss(pred_logits: Tensor, decoder: DecoderOutputs, gt, stats: GateStatistics | None,
               lam: float = 1e-2) -> LossBreakdown:
    """``L_pred + L_aux + L_moe`` for one frame batch.

    ``pred_logits`` is the final mask at input resolution.
    """
    l_pred = structure_loss(pred_logits, gt)
    aux = aux_loss_terms(decoder, gt)
    if stats is not None and len(stats):
        l_moe = load_balance_loss(stats, lam)
    else:
        l_moe = Tensor(0.0, dtype=pred_logits.dtype)
    return LossBreakdown(l_pred + aux.total + l_moe, l_pred, aux.total, l_moe, aux.coarse, aux.edge)


def clip_loss(bundles, gt_frames, stats: GateStatistics | None, lam: float = 1e-2) -> LossBreakdown:
    """Average the per-frame prediction and auxiliary losses over a clip, add ``L_moe`` once.

    ``gt_frames`` is ``N x T x 1 x H x W``.
    """
    gt_frames = np.asarray(gt_frames)
    if gt_frames.ndim == 4:
        gt_frames = gt_frames[None]
    n_frames = len(bundles)
    pred = aux = None
    coarse, edge = [0.0] * 3, [0.0] * 3
    for t, b in enumerate(bundles):
        lp = structure_loss(b.logits, gt_frames[:, t])
        la = aux_loss_terms(b.decoder, gt_frames[:, t])
        pred = lp if pred is None else pred + lp
        aux = la.total if aux is None else aux + la.total
        coarse = [c + x for c, x in zip(coarse, la.coarse)]
        edge = [e + x for e, x in zip(edge, la.edge)]
    pred = pred * (1.0 / n_frames)
    aux = aux * (1.0 / n_frames)
    if stats is not None and len(stats):
        l_moe = load_balance_loss(stats, lam)
    else:
        l_moe = Tensor(0.0, dtype=pred.dtype)
    return LossBreakdown(pred + aux + l_moe, pred, aux, l_moe,
                         [c * (1.0 / n_frames) for c in coarse], [e * (1.0 / n_frames) for e in edge])
