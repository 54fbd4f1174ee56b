"""Paired training images: one foreground and alpha over two backgrounds."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CompositePair:
    image_a: np.ndarray  # (H, W, 3) uint8
    image_b: np.ndarray
    alpha: np.ndarray  # (H, W) float in [0, 1]
    background_a_id: str
    background_b_id: str
    seed: int


def _rgb(img, name):
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must be an (H, W, 3) image, got {arr.shape}")
    return arr


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def composite_alpha(foreground, alpha, background) -> np.ndarray:
    """``alpha * F + (1 - alpha) * B`` per channel, rounded half away from zero to uint8."""
    f = _rgb(foreground, "foreground").astype(np.float64)
    b = _rgb(background, "background").astype(np.float64)
    a = np.asarray(alpha, dtype=np.float64)
    if f.shape != b.shape or a.shape != f.shape[:2]:
        raise ValueError(
            f"dimension mismatch: foreground {f.shape[:2]}, alpha {a.shape}, background {b.shape[:2]}"
        )
    a = np.clip(a, 0.0, 1.0)[..., None]
    out = a * f + (1.0 - a) * b
    return np.clip(round_half_away(out), 0, 255).astype(np.uint8)


def center_crop(img: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < height or w < width:
        raise ValueError(f"background {h}x{w} is smaller than the {height}x{width} canvas")
    top = (h - height) // 2
    left = (w - width) // 2
    return img[top:top + height, left:left + width]


def make_pair(foreground, alpha, backgrounds, seed: int) -> CompositePair:
    """Composite the same foreground over two distinct, seed-chosen backgrounds.

    ``backgrounds`` is a sequence of ``(id, image)``; images larger than the
    canvas are center-cropped, smaller ones are rejected.
    """
    pool = list(backgrounds)
    if len(pool) < 2:
        raise ValueError("background pool needs at least two images")
    fg = _rgb(foreground, "foreground")
    h, w = fg.shape[:2]
    rng = np.random.default_rng(seed)
    i, j = (int(k) for k in rng.choice(len(pool), size=2, replace=False))
    (id_a, bg_a), (id_b, bg_b) = pool[i], pool[j]
    img_a = composite_alpha(fg, alpha, center_crop(_rgb(bg_a, "background"), h, w))
    img_b = composite_alpha(fg, alpha, center_crop(_rgb(bg_b, "background"), h, w))
    return CompositePair(img_a, img_b, np.asarray(alpha, dtype=np.float64), str(id_a), str(id_b), seed)
