"""Saliency metrics: MAE, F-measure, S-measure and E-measure.

F and E sweep the 255 thresholds ``j/255, j = 1..255`` (a pixel is
foreground when ``pred >= threshold``). The headline F is the maximum over
thresholds, the headline E the mean.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA2 = 0.3
ALPHA = 0.5
THRESHOLDS = np.arange(1, 256) / 255.0


def _prep(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return np.squeeze(pred), np.squeeze(gt) > 0.5


def mae(pred, gt) -> float:
    pred, gt = _prep(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def _binarized(pred: np.ndarray) -> np.ndarray:
    return pred[None] >= THRESHOLDS.reshape((-1,) + (1,) * pred.ndim)


def f_curve(pred, gt) -> np.ndarray:
    """F-measure at each threshold."""
    pred, gt = _prep(pred, gt)
    n_fg = gt.sum()
    if n_fg == 0:
        return np.zeros(len(THRESHOLDS))
    fg = _binarized(pred)
    axes = tuple(range(1, fg.ndim))
    tp = (fg & gt).sum(axis=axes).astype(np.float64)
    n_pred = fg.sum(axis=axes).astype(np.float64)
    precision = np.divide(tp, n_pred, out=np.zeros_like(tp), where=n_pred > 0)
    recall = tp / n_fg
    denom = BETA2 * precision + recall
    return np.divide((1 + BETA2) * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def f_measure(pred, gt) -> float:
    """Max-F over thresholds; 0 for an empty ground-truth foreground."""
    return float(f_curve(pred, gt).max())


def mean_f_measure(pred, gt) -> float:
    return float(f_curve(pred, gt).mean())


def _enhanced_alignment(fm: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Mean enhanced-alignment score for a stack of binary maps ``K x H x W``."""
    gtf = gt.astype(np.float64)
    fm = fm.astype(np.float64)
    axes = tuple(range(1, fm.ndim))
    if gtf.sum() == 0:
        return (1.0 - fm).mean(axis=axes)
    if gtf.sum() == gtf.size:
        return fm.mean(axis=axes)
    phi_gt = gtf - gtf.mean()
    phi_fm = fm - fm.mean(axis=axes, keepdims=True)
    num = 2.0 * phi_gt * phi_fm
    den = phi_gt ** 2 + phi_fm ** 2
    align = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return (((align + 1.0) ** 2) / 4.0).mean(axis=axes)


def e_curve(pred, gt) -> np.ndarray:
    pred, gt = _prep(pred, gt)
    return _enhanced_alignment(_binarized(pred), gt)


def e_measure(pred, gt) -> float:
    """Mean E-measure over thresholds."""
    return float(e_curve(pred, gt).mean())


def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mu = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma)


def s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    u = gt.mean()
    fg = _object_score(pred[gt])
    bg = _object_score(1.0 - pred[~gt])
    return u * fg + (1.0 - u) * bg


def _centroid(gt: np.ndarray) -> tuple[int, int]:
    """1-based rounded centroid ``(x, y)``; image centre for an empty mask."""
    h, w = gt.shape
    if not gt.any():
        return int(np.floor(w / 2 + 0.5)), int(np.floor(h / 2 + 0.5))
    ys, xs = np.nonzero(gt)
    return int(np.floor(xs.mean() + 1 + 0.5)), int(np.floor(ys.mean() + 1 + 0.5))


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x, y = pred.mean(), gt.mean()
    if n > 1:
        sx = ((pred - x) ** 2).sum() / (n - 1)
        sy = ((gt - y) ** 2).sum() / (n - 1)
        sxy = ((pred - x) * (gt - y)).sum() / (n - 1)
    else:
        sx = sy = sxy = 0.0
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / beta
    return 1.0 if beta == 0 else 0.0


def s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    x, y = _centroid(gt)
    gtf = gt.astype(np.float64)
    quads = [(slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
             (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))]
    area = h * w
    weights = [x * y / area, (w - x) * y / area, x * (h - y) / area]
    weights.append(1.0 - sum(weights))
    score = 0.0
    for wt, (rs, cs) in zip(weights, quads):
        p, g = pred[rs, cs], gtf[rs, cs]
        if p.size:
            score += wt * _ssim(p, g)
    return score


def s_measure(pred, gt) -> float:
    pred, gt = _prep(pred, gt)
    if pred.ndim != 2:
        raise ValueError("s_measure expects a single H x W map")
    u = gt.mean()
    if u == 0:
        return float(1.0 - pred.mean())
    if u == 1:
        return float(pred.mean())
    return float(max(ALPHA * s_object(pred, gt) + (1 - ALPHA) * s_region(pred, gt), 0.0))


@dataclass
class MetricReport:
    E: float
    S: float
    F: float
    MAE: float
    mean_F: float = 0.0
    degenerate: bool = False
    per_frame: list = field(default_factory=list)

    HEADER = "# F: max over 255 thresholds (beta^2=0.3); E: mean over 255 thresholds; S: alpha=0.5"

    def line(self, sequence: str, frame) -> str:
        return f"{sequence},{frame},{self.E:.6f},{self.S:.6f},{self.F:.6f},{self.MAE:.6f}"


def evaluate_frame(pred, gt) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    fg = (np.squeeze(gt) > 0.5)
    degenerate = bool(fg.all() or not fg.any())
    return MetricReport(E=e_measure(pred, gt), S=s_measure(pred, gt), F=f_measure(pred, gt),
                        MAE=mae(pred, gt), mean_F=mean_f_measure(pred, gt), degenerate=degenerate)


def mean_report(reports: list[MetricReport]) -> MetricReport:
    if not reports:
        raise ValueError("no frames to average")
    return MetricReport(
        E=float(np.mean([r.E for r in reports])), S=float(np.mean([r.S for r in reports])),
        F=float(np.mean([r.F for r in reports])), MAE=float(np.mean([r.MAE for r in reports])),
        mean_F=float(np.mean([r.mean_F for r in reports])),
        degenerate=any(r.degenerate for r in reports), per_frame=list(reports),
    )
