"""Slow reference implementations used to cross-check the fast paths.

Nothing here shares code with the routines it verifies.
"""
from __future__ import annotations

import itertools
import math
from collections import deque

import numpy as np


def lp_permutation_optimum(cost) -> float:
    """Exact uniform-marginal OT value: min over permutations of the mean
    assignment cost (the vertices of the scaled Birkhoff polytope)."""
    c = np.asarray(cost, dtype=np.float64)
    k = c.shape[0]
    if c.shape != (k, k):
        raise ValueError("permutation oracle needs a square cost matrix")
    best = math.inf
    for perm in itertools.permutations(range(k)):
        best = min(best, sum(c[i, j] for i, j in enumerate(perm)) / k)
    return best


def _gaussian_derivative_filter(sigma: float):
    half = int(math.ceil(3 * sigma))
    size = 2 * half + 1
    hx = [[0.0] * size for _ in range(size)]
    for i in range(size):
        for j in range(size):
            u, v = i - half, j - half
            g = math.exp(-u * u / (2 * sigma * sigma)) / (sigma * math.sqrt(2 * math.pi))
            gv = math.exp(-v * v / (2 * sigma * sigma)) / (sigma * math.sqrt(2 * math.pi))
            hx[i][j] = g * (-v * gv / (sigma * sigma))
    norm = math.sqrt(sum(x * x for row in hx for x in row))
    hx = [[x / norm for x in row] for row in hx]
    hy = [[hx[j][i] for j in range(size)] for i in range(size)]
    return hx, hy, half


def _convolve_nearest(img, kernel, half):
    h, w = len(img), len(img[0])
    out = [[0.0] * w for _ in range(h)]
    size = 2 * half + 1
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for i in range(size):
                yy = min(max(y - (i - half), 0), h - 1)
                for j in range(size):
                    xx = min(max(x - (j - half), 0), w - 1)
                    acc += kernel[i][j] * img[yy][xx]
            out[y][x] = acc
    return out


def naive_grad_error(pred, gt, sigma: float = 1.4) -> float:
    """Raw gradient error via direct O(N k^2) convolution with edge replication."""
    hx, hy, half = _gaussian_derivative_filter(sigma)
    total = 0.0
    mags = []
    for img in (np.asarray(pred, dtype=float).tolist(), np.asarray(gt, dtype=float).tolist()):
        gx = _convolve_nearest(img, hx, half)
        gy = _convolve_nearest(img, hy, half)
        mags.append([[math.hypot(a, b) for a, b in zip(r1, r2)] for r1, r2 in zip(gx, gy)])
    for r1, r2 in zip(*mags):
        for a, b in zip(r1, r2):
            total += (a - b) ** 2
    return total


def _flood_largest(mask):
    h, w = len(mask), len(mask[0])
    seen = [[False] * w for _ in range(h)]
    best = []
    for y in range(h):
        for x in range(w):
            if not mask[y][x] or seen[y][x]:
                continue
            comp = []
            queue = deque([(y, x)])
            seen[y][x] = True
            while queue:
                cy, cx = queue.popleft()
                comp.append((cy, cx))
                for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                    if 0 <= ny < h and 0 <= nx < w and mask[ny][nx] and not seen[ny][nx]:
                        seen[ny][nx] = True
                        queue.append((ny, nx))
            if len(comp) > len(best):
                best = comp
    return set(best)


def flood_fill_connectivity_error(pred, gt, step: float = 0.1) -> float:
    """Raw connectivity error with 4-connected flood fill, pixel by pixel."""
    p = np.asarray(pred, dtype=float).tolist()
    g = np.asarray(gt, dtype=float).tolist()
    h, w = len(p), len(p[0])
    n = int(round(1.0 / step))
    thresholds = [i * step for i in range(n + 1)]
    level = [[None] * w for _ in range(h)]
    for k in range(1, n + 1):
        t = thresholds[k]
        both = [[p[y][x] >= t and g[y][x] >= t for x in range(w)] for y in range(h)]
        keep = _flood_largest(both)
        for y in range(h):
            for x in range(w):
                if level[y][x] is None and (y, x) not in keep:
                    level[y][x] = thresholds[k - 1]
    total = 0.0
    for y in range(h):
        for x in range(w):
            lv = 1.0 if level[y][x] is None else level[y][x]
            dp, dg = p[y][x] - lv, g[y][x] - lv
            phi_p = 1.0 - (dp if dp >= 0.15 else 0.0)
            phi_g = 1.0 - (dg if dg >= 0.15 else 0.0)
            total += abs(phi_p - phi_g)
    return total
