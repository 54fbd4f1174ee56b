"""Prediction-head losses and the total training objective.

Matting heads use L1 + a Laplacian-pyramid loss; segmentation heads use
BCE + soft IoU. Each loss has a ``*_with_grad`` twin returning d loss / d pred.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

BCE_CLAMP = 1e-7
IOU_SMOOTH = 1.0
PYRAMID_LEVELS = 5
_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"dimension mismatch: pred {p.shape} vs gt {g.shape}")
    return p, g


def l1_matte_loss_with_grad(pred, gt):
    p, g = _pair(pred, gt)
    d = p - g
    return float(np.abs(d).mean()), np.sign(d) / d.size


def l1_matte_loss(pred, gt) -> float:
    return l1_matte_loss_with_grad(pred, gt)[0]


def _mirror(i: int, n: int) -> int:
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i %= period
    return i if i < n else period - i


@lru_cache(maxsize=64)
def _blur(n: int) -> np.ndarray:
    b = np.zeros((n, n))
    for r in range(n):
        for k, w in enumerate(_KERNEL):
            b[r, _mirror(r + k - 2, n)] += w
    return b


@lru_cache(maxsize=64)
def _reduce(n: int) -> np.ndarray:
    """Blur then keep even samples: (ceil(n/2), n)."""
    return _blur(n)[::2]


@lru_cache(maxsize=64)
def _expand(n: int) -> np.ndarray:
    """Zero-insert ceil(n/2) samples back to n, then blur with gain 2: (n, ceil(n/2))."""
    m = (n + 1) // 2
    z = np.zeros((n, m))
    z[np.arange(0, n, 2), np.arange(m)] = 1.0
    return 2.0 * _blur(n) @ z


def laplacian_pyramid(img, levels: int = PYRAMID_LEVELS) -> list[np.ndarray]:
    x = np.asarray(img, dtype=np.float64)
    _check_pyramid_size(x.shape, levels)
    bands = []
    for _ in range(levels - 1):
        h, w = x.shape
        down = _reduce(h) @ x @ _reduce(w).T
        bands.append(x - _expand(h) @ down @ _expand(w).T)
        x = down
    bands.append(x)
    return bands


def _check_pyramid_size(shape, levels):
    if levels < 1:
        raise ValueError("levels must be >= 1")
    need = 2 ** (levels - 1)
    if len(shape) != 2 or min(shape) < need:
        raise ValueError(f"image {shape} too small for {levels} pyramid levels (need >= {need} per axis)")


def laplacian_pyramid_loss_with_grad(pred, gt, levels: int = PYRAMID_LEVELS):
    """``sum_i 2^i * mean|Lap_i(pred) - Lap_i(gt)|``; bands are linear so the
    gradient is the adjoint pyramid applied to the band signs."""
    p, g = _pair(pred, gt)
    _check_pyramid_size(p.shape, levels)
    gauss = [p - g]
    for _ in range(levels - 1):
        x = gauss[-1]
        gauss.append(_reduce(x.shape[0]) @ x @ _reduce(x.shape[1]).T)

    loss = 0.0
    signs = []
    for i in range(levels):
        x = gauss[i]
        if i < levels - 1:
            band = x - _expand(x.shape[0]) @ gauss[i + 1] @ _expand(x.shape[1]).T
        else:
            band = x
        wgt = 2.0 ** i
        loss += wgt * np.abs(band).mean()
        signs.append(wgt * np.sign(band) / band.size)

    grad = signs[-1]
    for i in range(levels - 2, -1, -1):
        h, w = gauss[i].shape
        s = signs[i]
        # adjoint of band_i wrt gauss_i plus the reduce path feeding gauss_{i+1}
        up_adj = _expand(h).T @ s @ _expand(w)
        grad = s + _reduce(h).T @ (grad - up_adj) @ _reduce(w)
    return float(loss), grad


def laplacian_pyramid_loss(pred, gt, levels: int = PYRAMID_LEVELS) -> float:
    return laplacian_pyramid_loss_with_grad(pred, gt, levels)[0]


def bce_loss_with_grad(pred, gt):
    p, g = _pair(pred, gt)
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -(g * np.log(pc) + (1.0 - g) * np.log1p(-pc)).mean()
    inside = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)
    grad = (-g / pc + (1.0 - g) / (1.0 - pc)) * inside / p.size
    return float(loss), grad


def bce_loss(pred, gt) -> float:
    return bce_loss_with_grad(pred, gt)[0]


def iou_loss_with_grad(pred, gt, smooth: float = IOU_SMOOTH):
    p, g = _pair(pred, gt)
    inter = (p * g).sum()
    union = p.sum() + g.sum() - inter
    loss = 1.0 - (inter + smooth) / (union + smooth)
    grad = -(g * (union + smooth) - (inter + smooth) * (1.0 - g)) / (union + smooth) ** 2
    return float(loss), grad


def iou_loss(pred, gt, smooth: float = IOU_SMOOTH) -> float:
    return iou_loss_with_grad(pred, gt, smooth)[0]


def head_loss_with_grad(pred, gt, task: str, levels: int = PYRAMID_LEVELS):
    """Returns ``(total, grad, parts)`` for ``task`` in {"matting", "dis"}."""
    if task == "matting":
        l1, g1 = l1_matte_loss_with_grad(pred, gt)
        lap, g2 = laplacian_pyramid_loss_with_grad(pred, gt, levels)
        return l1 + lap, g1 + g2, {"l1": l1, "laplacian": lap}
    if task == "dis":
        bce, g1 = bce_loss_with_grad(pred, gt)
        iou, g2 = iou_loss_with_grad(pred, gt)
        return bce + iou, g1 + g2, {"bce": bce, "iou": iou}
    raise ValueError(f"unknown task {task!r}; expected 'matting' or 'dis'")


@dataclass(frozen=True)
class LossWeights:
    kd: float = 1.0
    adv: float = 1.0
    ot: float = 1.0
    head: float = 1.0


def total_loss(kd: float, adv: float, ot: float, head: float, weights: LossWeights = LossWeights()) -> float:
    parts = {"kd": kd, "adv": adv, "ot": ot, "head": head}
    for name, value in parts.items():
        if not math.isfinite(value):
            raise ValueError(f"loss component {name} is not finite ({value})")
    return weights.kd * kd + weights.adv * adv + weights.ot * ot + weights.head * head
