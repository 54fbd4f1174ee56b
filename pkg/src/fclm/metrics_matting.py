"""Alpha-matte quality metrics: SAD, MSE, MAD, gradient and connectivity
errors, and instance-level IMQ scores.

Mattes are float arrays in [0, 1]. SAD, Grad and Conn are reported divided by
1000 (the usual matting-benchmark units) with the raw sums kept alongside.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

GRAD_SIGMA = 1.4
CONN_STEP = 0.1
CONN_MIN_DIFF = 0.15
SCALE = 1e3


def _pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"dimension mismatch: pred {p.shape} vs gt {g.shape}")
    return p, g


def sad(pred, gt) -> tuple[float, float]:
    """Returns ``(scaled, raw)``."""
    p, g = _pair(pred, gt)
    raw = float(np.abs(p - g).sum())
    return raw / SCALE, raw


def mse_mad(pred, gt) -> tuple[float, float]:
    p, g = _pair(pred, gt)
    d = p - g
    return float((d * d).mean()), float(np.abs(d).mean())


def _gauss(x, sigma):
    return np.exp(-x ** 2 / (2 * sigma ** 2)) / (sigma * np.sqrt(2 * np.pi))


@lru_cache(maxsize=8)
def gaussian_derivative_kernels(sigma: float = GRAD_SIGMA):
    """First-order Gaussian derivative filters, truncated at 3 sigma, unit L2 norm."""
    half = int(np.ceil(3 * sigma))
    u = np.arange(-half, half + 1, dtype=np.float64)
    g = _gauss(u, sigma)
    dg = -u * g / sigma ** 2
    hx = np.outer(g, dg)  # rows: smoothing, cols: derivative
    hx /= np.sqrt((hx ** 2).sum())
    hx.setflags(write=False)
    return hx, hx.T


def gradient_magnitude(img, sigma: float = GRAD_SIGMA) -> np.ndarray:
    hx, hy = gaussian_derivative_kernels(sigma)
    gx = ndimage.convolve(img, hx, mode="nearest")
    gy = ndimage.convolve(img, hy, mode="nearest")
    return np.sqrt(gx ** 2 + gy ** 2)


def grad_error(pred, gt, sigma: float = GRAD_SIGMA) -> tuple[float, float]:
    """Returns ``(scaled, raw)`` of sum over pixels of (|grad pred| - |grad gt|)^2."""
    p, g = _pair(pred, gt)
    if p.ndim != 2 or min(p.shape) < 3:
        raise ValueError("grad_error needs a 2-D image of at least 3x3")
    raw = float(((gradient_magnitude(p, sigma) - gradient_magnitude(g, sigma)) ** 2).sum())
    return raw / SCALE, raw


def conn_thresholds(step: float) -> list[float]:
    n = int(round(1.0 / step))
    return [i * step for i in range(n + 1)]


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 4-connected component; ties go to the component found first in raster order."""
    labels, n = ndimage.label(mask)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def connectivity_error(pred, gt, step: float = CONN_STEP, component_fn=largest_component) -> tuple[float, float]:
    """Returns ``(scaled, raw)`` connectivity error.

    For each threshold, pixels outside the largest component shared by both
    thresholded mattes get their connectivity level fixed at the previous
    threshold; the error compares the degradation maps of pred and gt.
    """
    p, g = _pair(pred, gt)
    if not 0.0 < step < 1.0:
        raise ValueError("connectivity step must lie in (0, 1)")
    thresholds = conn_thresholds(step)
    level = np.full(p.shape, -1.0)
    for prev, t in zip(thresholds[:-1], thresholds[1:]):
        omega = component_fn((p >= t) & (g >= t))
        level[(level == -1) & ~omega] = prev
    level[level == -1] = 1.0
    dp = p - level
    dg = g - level
    phi_p = 1.0 - dp * (dp >= CONN_MIN_DIFF)
    phi_g = 1.0 - dg * (dg >= CONN_MIN_DIFF)
    raw = float(np.abs(phi_p - phi_g).sum())
    return raw / SCALE, raw


@dataclass(frozen=True)
class MatteReport:
    sad: float
    sad_raw: float
    mse: float
    mad: float
    grad: float
    conn: float
    pixel_count: int

    def as_dict(self):
        return asdict(self)


def evaluate_matte(pred, gt, sigma: float = GRAD_SIGMA, step: float = CONN_STEP) -> MatteReport:
    p, g = _pair(pred, gt)
    s, s_raw = sad(p, g)
    mse, mad = mse_mad(p, g)
    return MatteReport(s, s_raw, mse, mad, grad_error(p, g, sigma)[0], connectivity_error(p, g, step)[0], p.size)


def alpha_iou(a, b, threshold: float = 0.5) -> float:
    ma, mb = np.asarray(a) >= threshold, np.asarray(b) >= threshold
    union = np.logical_or(ma, mb).sum()
    return float(np.logical_and(ma, mb).sum() / union) if union else 0.0


_QUALITY = {
    "mse": lambda p, g: mse_mad(p, g)[0],
    "mad": lambda p, g: mse_mad(p, g)[1],
    "grad": lambda p, g: grad_error(p, g)[0],
    "conn": lambda p, g: connectivity_error(p, g)[0],
}


def match_instances(pred_instances, gt_instances) -> list[tuple[int, int]]:
    """Greedy one-to-one matching by descending alpha IoU (pairs with IoU > 0 only)."""
    cand = []
    for i, p in enumerate(pred_instances):
        for j, g in enumerate(gt_instances):
            iou = alpha_iou(p, g)
            if iou > 0:
                cand.append((-iou, i, j))
    cand.sort()
    used_p, used_g, pairs = set(), set(), []
    for _, i, j in cand:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
            pairs.append((i, j))
    return pairs


def imq(pred_instances, gt_instances, quality: str = "mse") -> float:
    """Instance matting quality in [0, 100].

    Matched pairs score ``1 / (1 + error)``; unmatched ground truth and
    unmatched predictions score 0 and both count in the denominator.
    """
    if quality not in _QUALITY:
        raise ValueError(f"unknown IMQ quality {quality!r}")
    gts = [np.asarray(g, dtype=np.float64) for g in gt_instances]
    preds = [np.asarray(p, dtype=np.float64) for p in pred_instances]
    if not gts:
        raise ValueError("IMQ needs at least one ground-truth instance")
    shape = gts[0].shape
    if any(x.shape != shape for x in gts + preds):
        raise ValueError("all instances must share the canvas dimensions")
    pairs = match_instances(preds, gts)
    score = sum(1.0 / (1.0 + _QUALITY[quality](preds[i], gts[j])) for i, j in pairs)
    unmatched_pred = len(preds) - len(pairs)
    return 100.0 * score / (len(gts) + unmatched_pred)
