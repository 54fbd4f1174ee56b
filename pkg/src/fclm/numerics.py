"""Dense primitives shared by the loss and metric modules.

Everything runs in float64. Matrices are plain 2-D numpy arrays; the helpers
here validate shapes and finiteness so callers can rely on clean inputs.
"""
from __future__ import annotations

import numpy as np

KL_EPS = 1e-12


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("degenerate vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def row_softmax(m, temperature: float = 1.0) -> np.ndarray:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(m, dtype=np.float64) / temperature
    if not np.all(np.isfinite(z)):
        raise ValueError("row_softmax input contains non-finite values")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_row_softmax(m, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(m, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kl_divergence(p, q, eps: float = KL_EPS) -> float:
    """KL(p || q) with 0 ln 0 = 0 and q floored at ``eps``."""
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.size} vs {q.size}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("probability vectors must be nonnegative")
    if abs(p.sum() - 1.0) > 1e-6 or abs(q.sum() - 1.0) > 1e-6:
        raise ValueError("probability vectors must sum to 1")
    return float(kl_rows(p[None, :], q[None, :], eps)[0])


def kl_rows(p: np.ndarray, q: np.ndarray, eps: float = KL_EPS) -> np.ndarray:
    """Row-wise KL(p_i || q_i) without validation; used on softmax outputs."""
    qc = np.maximum(q, eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(qc)), 0.0)
    return terms.sum(axis=-1)
