"""PNG reading and writing for mattes, masks, depth maps and RGB images."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .compositor import round_half_away


class ImageReadError(ValueError):
    def __init__(self, path, reason: str):
        super().__init__(f"cannot read {path}: {reason}")
        self.path = str(path)


def _open(path) -> Image.Image:
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except FileNotFoundError:
        raise ImageReadError(path, "no such file") from None
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageReadError(path, f"corrupt or unsupported image ({exc})") from None


def load_gray(path) -> np.ndarray:
    """Single-channel image as float64 in [0, 1]; 16-bit divides by 65535, 8-bit by 255."""
    im = _open(path)
    if im.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(im, dtype=np.float64)
        return np.clip(arr / 65535.0, 0.0, 1.0)
    if im.mode != "L":
        im = im.convert("L")
    return np.asarray(im, dtype=np.float64) / 255.0


def load_rgb(path) -> np.ndarray:
    im = _open(path)
    if im.mode != "RGB":
        im = im.convert("RGB")
    return np.asarray(im, dtype=np.uint8).copy()


def save_gray(path, values, bits: int = 8) -> None:
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    if bits == 8:
        Image.fromarray(round_half_away(v * 255.0).astype(np.uint8), mode="L").save(path)
    elif bits == 16:
        Image.fromarray(round_half_away(v * 65535.0).astype(np.uint16)).save(path)
    else:
        raise ValueError("bits must be 8 or 16")


def save_rgb(path, image) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) uint8 image")
    Image.fromarray(arr, mode="RGB").save(path)


def list_pngs(directory) -> list[str]:
    d = Path(directory)
    if not d.is_dir():
        raise ImageReadError(directory, "not a directory")
    return sorted(p.name for p in d.iterdir() if p.is_file() and p.suffix.lower() == ".png")
