"""Dichotomous-segmentation metrics: max F-measure, weighted F-measure, MAE,
S-measure, E-measure and an approximate human-correction-effort count.

``pred`` is a float map in [0, 1]; ``gt`` is binary.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage import measure

EPS = np.spacing(1)
BETA_SQ = 0.3
WFM_BETA_SQ = 1.0
WFM_SIGMA = 5.0
WFM_SUPPORT = 7
S_ALPHA = 0.5
HCE_GAMMA = 5
LEVELS = 255


class UndefinedMetric(ValueError):
    pass


def _pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"dimension mismatch: pred {p.shape} vs gt {g.shape}")
    return p, g > 0.5


def quantize(pred) -> np.ndarray:
    """Map [0, 1] predictions onto the 0..255 grid used by threshold sweeps."""
    return np.rint(np.clip(pred, 0.0, 1.0) * LEVELS).astype(np.int64)


def f_curve(pred, gt, beta_sq: float = BETA_SQ) -> np.ndarray:
    """F-measure at each threshold t/255, t = 0..255, binarising ``pred >= t``."""
    p, g = _pair(pred, gt)
    if not g.any():
        raise UndefinedMetric("undefined recall")
    q = quantize(p)
    hist_fg = np.bincount(q[g], minlength=LEVELS + 1)
    hist_bg = np.bincount(q[~g], minlength=LEVELS + 1)
    tp = np.cumsum(hist_fg[::-1])[::-1].astype(np.float64)
    fp = np.cumsum(hist_bg[::-1])[::-1].astype(np.float64)
    pos = tp + fp
    precision = np.divide(tp, pos, out=np.zeros_like(tp), where=pos > 0)
    recall = tp / g.sum()
    denom = beta_sq * precision + recall
    return np.divide((1 + beta_sq) * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def max_f_measure(pred, gt, beta_sq: float = BETA_SQ) -> float:
    return float(f_curve(pred, gt, beta_sq).max())


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1]
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    return k / k.sum()


def weighted_f_measure(pred, gt, beta_sq: float = WFM_BETA_SQ, sigma: float = WFM_SIGMA) -> float:
    """Weighted F-measure with Gaussian error dependency and distance-decayed false positives."""
    p, g = _pair(pred, gt)
    if not g.any():
        raise UndefinedMetric("weighted F-measure needs a nonempty ground truth")
    dist, (iy, ix) = ndimage.distance_transform_edt(~g, return_indices=True)
    err = np.abs(p - g)
    # background errors inherit the error at their nearest foreground pixel
    err_t = err[iy, ix]
    err_t[g] = err[g]
    err_a = ndimage.convolve(err_t, _gaussian_kernel(WFM_SUPPORT, sigma), mode="constant", cval=0.0)
    min_e = np.where(g & (err_a < err), err_a, err)
    decay = np.where(g, 1.0, 2.0 - np.exp(np.log(0.5) / 5.0 * dist))
    ew = min_e * decay
    tpw = g.sum() - ew[g].sum()
    fpw = ew[~g].sum()
    recall = 1.0 - ew[g].mean()
    precision = tpw / (tpw + fpw + EPS)
    return float((1 + beta_sq) * recall * precision / (recall + beta_sq * precision + EPS))


def mae(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.abs(p - g).mean())


def _s_object(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mu = x.mean()
    sd = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sd + EPS)


def _ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    if n == 0:
        return 0.0
    x, y = p.mean(), g.mean()
    dof = max(n - 1, 1)
    sx = ((p - x) ** 2).sum() / dof
    sy = ((g - y) ** 2).sum() / dof
    sxy = ((p - x) * (g - y)).sum() / dof
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def s_measure(pred, gt, alpha: float = S_ALPHA) -> float:
    """Structure measure: object-aware plus region-aware similarity."""
    p, gb = _pair(pred, gt)
    g = gb.astype(np.float64)
    ratio = g.mean()
    if ratio == 0:
        return float(1.0 - p.mean())
    if ratio == 1:
        return float(p.mean())
    fg = p[gb]
    bg = 1.0 - p[~gb]
    s_obj = ratio * _s_object(fg) + (1 - ratio) * _s_object(bg)

    h, w = g.shape
    ys, xs = np.nonzero(gb)
    cx = int(np.round(xs.mean())) + 1
    cy = int(np.round(ys.mean())) + 1
    area = h * w
    weights = [cx * cy / area, (w - cx) * cy / area, cx * (h - cy) / area]
    weights.append(1.0 - sum(weights))
    blocks = [
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, w)),
        (slice(cy, h), slice(0, cx)),
        (slice(cy, h), slice(cx, w)),
    ]
    s_reg = sum(wt * _ssim(p[b], g[b]) for wt, b in zip(weights, blocks))
    return float(max(0.0, alpha * s_obj + (1 - alpha) * s_reg))


def _enhanced_alignment(binary: np.ndarray, g: np.ndarray) -> float:
    n = g.size
    gf = g.astype(np.float64)
    bf = binary.astype(np.float64)
    if not g.any():
        return float((1.0 - bf).sum() / n)
    if g.all():
        return float(bf.sum() / n)
    a = bf - bf.mean()
    b = gf - gf.mean()
    align = 2.0 * a * b / (a * a + b * b + EPS)
    return float(((align + 1.0) ** 2 / 4.0).sum() / n)


def e_measure(pred, gt, mode: str = "mean") -> float:
    """Enhanced-alignment measure.

    ``mean`` averages over the 255 nontrivial thresholds t/255, t = 1..255;
    ``max`` takes their maximum; ``adaptive`` binarises at twice the mean
    prediction (capped at 1).
    """
    p, g = _pair(pred, gt)
    if mode == "adaptive":
        thr = min(2.0 * p.mean(), 1.0)
        return _enhanced_alignment(p >= thr, g)
    q = quantize(p)
    scores = np.array([_enhanced_alignment(q >= t, g) for t in range(1, LEVELS + 1)])
    if mode == "mean":
        return float(scores.mean())
    if mode == "max":
        return float(scores.max())
    raise ValueError(f"unknown E-measure mode {mode!r}")


def _perp_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    norm = np.hypot(*ab)
    if norm == 0:
        return np.hypot(*(pts - a).T)
    return np.abs(ab[0] * (pts[:, 1] - a[1]) - ab[1] * (pts[:, 0] - a[0])) / norm


def douglas_peucker(points: np.ndarray, tolerance: float) -> np.ndarray:
    """Open-polyline simplification; returns the kept vertices in order."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        return pts
    keep = np.zeros(len(pts), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        d = _perp_distance(pts[i + 1:j], pts[i], pts[j])
        k = int(np.argmax(d))
        if d[k] > tolerance:
            m = i + 1 + k
            keep[m] = True
            stack.extend([(i, m), (m, j)])
    return pts[keep]


def closed_polygon_vertices(contour: np.ndarray, tolerance: float) -> int:
    """Dominant vertices of a closed contour, anchored at its two farthest points."""
    pts = np.asarray(contour, dtype=np.float64)
    if len(pts) > 1 and np.allclose(pts[0], pts[-1]):
        pts = pts[:-1]
    if len(pts) <= 2:
        return len(pts)
    d0 = np.hypot(*(pts - pts[0]).T)
    i = int(np.argmax(d0))
    j = int(np.argmax(np.hypot(*(pts - pts[i]).T)))
    i, j = sorted((i, j))
    if i == j:
        return 1
    first = douglas_peucker(pts[i:j + 1], tolerance)
    second = douglas_peucker(np.vstack([pts[j:], pts[:i + 1]]), tolerance)
    return len(first) + len(second) - 2


def hce_regions(pred, gt, gamma: int = HCE_GAMMA) -> list[np.ndarray]:
    """Error regions (8-connected) left after discarding errors within ``gamma`` px of the gt boundary."""
    p, g = _pair(pred, gt)
    pb = p >= 0.5
    err = pb ^ g
    if g.any() and not g.all():
        boundary = g ^ ndimage.binary_erosion(g, border_value=1)
        boundary |= ~g & ndimage.binary_dilation(g)
        near = ndimage.distance_transform_edt(~boundary) <= gamma
        err &= ~near
    labels, n = ndimage.label(err, structure=np.ones((3, 3), dtype=bool))
    return [labels == k for k in range(1, n + 1)]


def hce(pred, gt, gamma: int = HCE_GAMMA) -> int:
    """Approximate human correction effort: polygon clicks needed to fix residual error regions."""
    clicks = 0
    for region in hce_regions(pred, gt, gamma):
        padded = np.pad(region.astype(np.float64), 1)
        for contour in measure.find_contours(padded, 0.5):
            clicks += closed_polygon_vertices(contour, gamma)
    return int(clicks)


@dataclass(frozen=True)
class DisReport:
    max_f: float | None
    weighted_f: float | None
    mae: float
    s_measure: float
    e_measure: float
    hce: int
    hce_approx: bool = True


def evaluate_dis(pred, gt, beta_sq: float = BETA_SQ, gamma: int = HCE_GAMMA, e_mode: str = "mean") -> DisReport:
    """All DIS metrics; F-measures are ``None`` when gt has no foreground."""
    try:
        mf = max_f_measure(pred, gt, beta_sq)
        wf = weighted_f_measure(pred, gt)
    except UndefinedMetric:
        mf = wf = None
    return DisReport(mf, wf, mae(pred, gt), s_measure(pred, gt), e_measure(pred, gt, e_mode), hce(pred, gt, gamma))
