"""Foreground token alignment between two images sharing a foreground.

Tokens under the (patch-pooled) ground-truth mask are kept, paired images can
exchange tokens at identical indices, and the two foreground token clouds are
matched with entropic optimal transport on a cosine-dissimilarity cost.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .grid import FeatureGrid, check_same_shape, pool_to_grid

log = logging.getLogger(__name__)

DEFAULT_EXCHANGE_RATIO = 0.25
DEFAULT_REG = 0.05
DEFAULT_MAX_ITERS = 500
DEFAULT_MARGINAL_TOL = 1e-6
NEWTON_MAX_SIZE = 512


class NoForegroundError(ValueError):
    pass


class SinkhornDivergence(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"Sinkhorn did not converge after {iterations} iterations (residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class PatchMask:
    values: np.ndarray  # (grid_h, grid_w)

    @property
    def grid_h(self) -> int:
        return self.values.shape[0]

    @property
    def grid_w(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ForegroundTokenSet:
    tokens: np.ndarray  # (K, dim)
    indices: np.ndarray  # original patch indices, ascending

    @property
    def k(self) -> int:
        return self.tokens.shape[0]


@dataclass(frozen=True)
class TransportPlan:
    pi: np.ndarray
    cost: np.ndarray
    reg: float
    iterations_used: int
    row_residual: float
    col_residual: float

    @property
    def converged_within(self) -> float:
        return max(self.row_residual, self.col_residual)


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    top = x.max(axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    return (np.log(np.exp(x - top).sum(axis=axis, keepdims=True)) + top).squeeze(axis)


def uniform(k: int) -> np.ndarray:
    if k < 1:
        raise ValueError("empirical distribution needs at least one atom")
    return np.full(k, 1.0 / k)


def patchify_mask(mask, patch_grid) -> PatchMask:
    return PatchMask(pool_to_grid(np.asarray(mask, dtype=np.float64), patch_grid))


def filter_foreground_tokens(features: FeatureGrid, mask: PatchMask) -> ForegroundTokenSet:
    if mask.values.shape != (features.grid_h, features.grid_w):
        raise ValueError(
            f"patch mask {mask.values.shape} does not match feature grid "
            f"{(features.grid_h, features.grid_w)}"
        )
    idx = np.flatnonzero(mask.values.ravel() > 0)
    if idx.size == 0:
        raise NoForegroundError("no foreground")
    return ForegroundTokenSet(features.tokens[idx], idx)


def filter_foreground_pair(a: FeatureGrid, b: FeatureGrid, mask_a: PatchMask, mask_b: PatchMask | None = None):
    """Filter both grids; differing masks are intersected so K matches."""
    check_same_shape(a, b)
    if mask_b is None or np.array_equal(mask_a.values > 0, mask_b.values > 0):
        return filter_foreground_tokens(a, mask_a), filter_foreground_tokens(b, mask_a)
    warnings.warn("foreground masks differ between the pair; using their intersection", stacklevel=2)
    both = PatchMask(np.where((mask_a.values > 0) & (mask_b.values > 0), 1.0, 0.0))
    return filter_foreground_tokens(a, both), filter_foreground_tokens(b, both)


def exchange_indices(num_tokens: int, ratio: float, seed: int) -> np.ndarray:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("exchange ratio must lie in [0, 1]")
    n = int(np.floor(ratio * num_tokens + 1e-9))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(num_tokens, size=n, replace=False))


def exchange_tokens(a: FeatureGrid, b: FeatureGrid, ratio: float = DEFAULT_EXCHANGE_RATIO, seed: int = 0):
    """Swap ``floor(ratio * P)`` same-index tokens between ``a`` and ``b``."""
    check_same_shape(a, b)
    idx = exchange_indices(a.num_tokens, ratio, seed)
    ta, tb = a.tokens.copy(), b.tokens.copy()
    ta[idx], tb[idx] = b.tokens[idx], a.tokens[idx]
    return a.with_tokens(ta), b.with_tokens(tb), idx


def _unit_rows(x: np.ndarray, name: str):
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise ValueError(f"zero-norm token in {name}")
    return x / norms[:, None], norms


def cost_matrix_cosine(a: ForegroundTokenSet, b: ForegroundTokenSet) -> np.ndarray:
    if a.k != b.k or a.k < 1:
        raise ValueError(f"token sets must have equal, nonzero size (got {a.k} and {b.k})")
    return cosine_cost(a.tokens, b.tokens)


def cosine_cost(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xu, _ = _unit_rows(x, "a")
    yu, _ = _unit_rows(y, "b")
    return np.clip(1.0 - xu @ yu.T, 0.0, 2.0)


def cosine_cost_backward(x: np.ndarray, y: np.ndarray, grad_cost: np.ndarray):
    """Pull ``d L / d C`` back to the token matrices for ``C = 1 - cos(x_i, y_j)``."""
    xu, nx = _unit_rows(x, "a")
    yu, ny = _unit_rows(y, "b")
    cos = xu @ yu.T
    g = -grad_cost
    # d cos_ij / d x_i = (yu_j - cos_ij xu_i) / |x_i|
    dx = (g @ yu - (g * cos).sum(axis=1)[:, None] * xu) / nx[:, None]
    dy = (g.T @ xu - (g * cos).sum(axis=0)[:, None] * yu) / ny[:, None]
    return dx, dy


def sinkhorn_plan(
    cost,
    u_a=None,
    u_b=None,
    reg: float = DEFAULT_REG,
    max_iters: int = DEFAULT_MAX_ITERS,
    marginal_tol: float = DEFAULT_MARGINAL_TOL,
    eps_scaling: bool = True,
    newton_after: int = 25,
) -> TransportPlan:
    """Entropic OT plan by log-domain Sinkhorn-Knopp scaling.

    With ``eps_scaling`` the potentials are warm-started along a geometric
    schedule of regularisations ending at ``reg``; only iterations at the final
    ``reg`` count against ``max_iters``. Scaling mixes slowly when the Gibbs
    kernel is nearly block-diagonal, so every ``newton_after`` iterations a
    stalled run is polished by Newton steps on the dual potentials (small
    problems only; ``newton_after=0`` disables this); each Newton step counts
    as one iteration.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or not np.all(np.isfinite(c)):
        raise ValueError("cost must be a finite 2-D matrix")
    if not reg > 0:
        raise ValueError("reg must be positive")
    n, m = c.shape
    u_a = uniform(n) if u_a is None else np.asarray(u_a, dtype=np.float64)
    u_b = uniform(m) if u_b is None else np.asarray(u_b, dtype=np.float64)
    for u, k in ((u_a, n), (u_b, m)):
        if u.shape != (k,) or np.any(u < 0) or abs(u.sum() - 1.0) > 1e-9:
            raise ValueError("marginals must be probability vectors matching the cost shape")
    if abs(u_a.sum() - u_b.sum()) > 1e-12:
        raise ValueError("marginals must carry equal mass")
    log_a = np.log(np.where(u_a > 0, u_a, 1.0)) + np.where(u_a > 0, 0.0, -np.inf)
    log_b = np.log(np.where(u_b > 0, u_b, 1.0)) + np.where(u_b > 0, 0.0, -np.inf)

    f = np.zeros(n)
    g = np.zeros(m)
    if eps_scaling:
        span = max(float(c.max() - c.min()), reg)
        schedule = []
        r = span
        while r > reg * 2:
            schedule.append(r)
            r /= 2
        for r in schedule:
            for _ in range(10):
                f = r * (log_a - _lse((g[None, :] - c) / r, axis=1))
                g = r * (log_b - _lse((f[:, None] - c) / r, axis=0))

    def residuals(f, g):
        pi = np.exp((f[:, None] + g[None, :] - c) / reg)
        return pi, np.abs(pi.sum(axis=1) - u_a).sum(), np.abs(pi.sum(axis=0) - u_b).sum()

    it = 0
    pi, r_row, r_col = residuals(f, g)
    while it < max_iters and max(r_row, r_col) > marginal_tol:
        f = reg * (log_a - _lse((g[None, :] - c) / reg, axis=1))
        g = reg * (log_b - _lse((f[:, None] - c) / reg, axis=0))
        it += 1
        pi, r_row, r_col = residuals(f, g)
        if newton_after and it % newton_after == 0 and max(r_row, r_col) > marginal_tol and n + m <= NEWTON_MAX_SIZE:
            f, g, steps = _newton_polish(c, u_a, u_b, f, g, reg, marginal_tol)
            it += steps
            pi, r_row, r_col = residuals(f, g)
    resid = max(r_row, r_col)
    if resid > 10 * marginal_tol:
        raise SinkhornDivergence(resid, it)
    if resid > marginal_tol:
        log.warning("Sinkhorn stopped at residual %.3e after %d iterations", resid, it)
    return TransportPlan(pi, c, reg, it, float(r_row), float(r_col))


def _newton_polish(c, u_a, u_b, f, g, reg, tol, max_steps: int = 30):
    """Damped Newton ascent on the entropic dual; returns ``(f, g, steps)``."""
    n, m = c.shape

    def dual(f, g):
        pi = np.exp((f[:, None] + g[None, :] - c) / reg)
        return u_a @ f + u_b @ g - reg * pi.sum(), pi

    val, pi = dual(f, g)
    for step in range(1, max_steps + 1):
        r, s = pi.sum(axis=1), pi.sum(axis=0)
        grad = np.concatenate([u_a - r, u_b - s])
        if np.abs(grad[:n]).sum() <= tol and np.abs(grad[n:]).sum() <= tol:
            return f, g, step - 1
        hess = np.block([[np.diag(r), pi], [pi.T, np.diag(s)]]) / reg
        # the dual is invariant to (f + t, g - t); pin that direction with a tiny ridge
        hess += 1e-12 * np.trace(hess) * np.eye(n + m) + np.outer(
            np.r_[np.ones(n), -np.ones(m)], np.r_[np.ones(n), -np.ones(m)]
        ) / (n + m)
        delta = np.linalg.solve(hess, grad)
        t = 1.0
        while t > 1e-8:
            f_new, g_new = f + t * delta[:n], g + t * delta[n:]
            val_new, pi_new = dual(f_new, g_new)
            if val_new >= val:
                break
            t *= 0.5
        else:
            return f, g, step
        f, g, val, pi = f_new, g_new, val_new, pi_new
    return f, g, max_steps


def ot_loss_with_grad(
    a: ForegroundTokenSet,
    b: ForegroundTokenSet,
    reg: float = DEFAULT_REG,
    max_iters: int = DEFAULT_MAX_ITERS,
    marginal_tol: float = DEFAULT_MARGINAL_TOL,
):
    """Transport cost <pi*, C> and its envelope gradient wrt both token sets.

    The plan is held fixed when differentiating, so the gradient is
    ``sum_ij pi_ij dC_ij``.
    """
    cost = cost_matrix_cosine(a, b)
    plan = sinkhorn_plan(cost, reg=reg, max_iters=max_iters, marginal_tol=marginal_tol)
    loss = float((plan.pi * cost).sum())
    da, db = cosine_cost_backward(a.tokens, b.tokens, plan.pi)
    return loss, da, db, plan


def ot_loss(a, b, reg: float = DEFAULT_REG, max_iters: int = DEFAULT_MAX_ITERS,
            marginal_tol: float = DEFAULT_MARGINAL_TOL) -> float:
    return ot_loss_with_grad(a, b, reg, max_iters, marginal_tol)[0]


def entropic_objective(plan: TransportPlan) -> float:
    """``<pi, C> + reg * sum pi (log pi - 1)``; its gradient in C is exactly pi."""
    pi = plan.pi
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(pi > 0, pi * (np.log(np.where(pi > 0, pi, 1.0)) - 1.0), 0.0)
    return float((pi * plan.cost).sum() + plan.reg * ent.sum())
