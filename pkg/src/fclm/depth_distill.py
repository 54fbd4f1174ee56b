"""Depth-aware feature distillation.

A teacher depth map is split at a threshold into foreground / background
weight maps. Teacher tokens pass through one of two meta-nets (a learnable
context token followed by Linear-ReLU-Linear) and the student is matched to
each projection with a per-token KL divergence, weighted by the depth maps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import FeatureGrid, check_same_shape, pool_to_grid
from .nn import Layer, TinyNet
from .numerics import KL_EPS, kl_rows, log_row_softmax

DEFAULT_DELTA = 0.25


@dataclass(frozen=True)
class DepthMap:
    values: np.ndarray  # (height, width) in [0, 1]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise ValueError("depth map must be a nonempty 2-D array")
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("depth values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def normalized(cls, raw) -> "DepthMap":
        """Rescale nonnegative raw depth by its maximum."""
        raw = np.asarray(raw, dtype=np.float64)
        if raw.size and raw.min() < 0:
            raise ValueError("raw depth must be nonnegative")
        top = raw.max() if raw.size else 0.0
        return cls(raw / top if top > 0 else raw)


@dataclass(frozen=True)
class DepthWeightPair:
    d_plus: np.ndarray  # (grid_h, grid_w)
    d_minus: np.ndarray
    delta: float


def pixel_depth_weights(depth: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    depth = np.asarray(depth, dtype=np.float64)
    top = depth.max()
    fg = depth > delta
    d_plus = np.where(fg, depth / top if top > 0 else 0.0, 0.0)
    d_minus = np.where(fg, 0.0, (delta - depth) / delta)
    return d_plus, d_minus


def compute_depth_weights(
    depth: DepthMap, delta: float = DEFAULT_DELTA, patch_grid=None, strict: bool = False
) -> DepthWeightPair:
    """Foreground/background weights, average-pooled onto ``patch_grid``.

    ``patch_grid`` defaults to one patch per pixel.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if strict and not np.any(depth.values > delta):
        raise ValueError("empty foreground partition")
    d_plus, d_minus = pixel_depth_weights(depth.values, delta)
    if patch_grid is None:
        patch_grid = depth.values.shape
    return DepthWeightPair(pool_to_grid(d_plus, patch_grid), pool_to_grid(d_minus, patch_grid), delta)


@dataclass
class MetaNet:
    """Projects teacher tokens into student space: ``body(t + context)``."""

    context: np.ndarray  # (teacher_dim,)
    body: TinyNet

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=np.float64).ravel()
        if self.context.size != self.body.in_dim:
            raise ValueError("context token length must equal the body input dim")

    @classmethod
    def init(cls, teacher_dim: int, hidden: int, student_dim: int, rng: np.random.Generator):
        body = TinyNet.init([teacher_dim, hidden, student_dim], ["relu", "none"], rng)
        return cls(rng.normal(0.0, 0.02, teacher_dim), body)

    @classmethod
    def identity(cls, dim: int) -> "MetaNet":
        eye = np.eye(dim)
        body = TinyNet([Layer(eye, np.zeros(dim), "relu"), Layer(eye.copy(), np.zeros(dim), "none")])
        return cls(np.zeros(dim), body)

    @property
    def in_dim(self) -> int:
        return self.body.in_dim

    @property
    def out_dim(self) -> int:
        return self.body.out_dim

    def __call__(self, x):
        return self.body(x)

    def parameters(self) -> np.ndarray:
        return np.concatenate([self.context, self.body.parameters()])

    def with_parameters(self, theta) -> "MetaNet":
        theta = np.asarray(theta, dtype=np.float64)
        n = self.context.size
        return MetaNet(theta[:n].copy(), self.body.with_parameters(theta[n:]))

    def apply_update(self, grads, lr: float) -> None:
        ctx_grad, layer_grads = grads
        self.context -= lr * ctx_grad
        self.body.apply_update(layer_grads, lr)


def meta_project(teacher: FeatureGrid, net: MetaNet) -> FeatureGrid:
    if teacher.dim != net.in_dim:
        raise ValueError(f"teacher dim {teacher.dim} != meta-net input dim {net.in_dim}")
    return teacher.with_tokens(net(teacher.tokens + net.context))


def token_kl(student: np.ndarray, teacher: np.ndarray, temperature: float) -> np.ndarray:
    log_p = log_row_softmax(student, temperature)
    log_q = log_row_softmax(teacher, temperature)
    return kl_rows(np.exp(log_p), np.exp(log_q))


def token_kl_with_grad(student, teacher, temperature):
    """Per-token KL(softmax(s/T) || softmax(t/T)) and its gradients wrt s and t."""
    log_p = log_row_softmax(student, temperature)
    log_q = log_row_softmax(teacher, temperature)
    p, q = np.exp(log_p), np.exp(log_q)
    gap = log_p - np.maximum(log_q, np.log(KL_EPS))
    kl = (p * gap).sum(axis=1)
    d_student = p * (gap - kl[:, None]) / temperature
    d_teacher = (q - p) / temperature
    return kl, d_student, d_teacher


def feature_distance(student: FeatureGrid, teacher: FeatureGrid, temperature: float = 1.0) -> float:
    """Mean per-token KL between softmax-normalised student and teacher tokens."""
    check_same_shape(student, teacher)
    return float(token_kl(student.tokens, teacher.tokens, temperature).mean())


def kd_loss_plain(student_a, student_b, teacher_a_proj, teacher_b_proj, temperature: float = 1.0) -> float:
    check_same_shape(student_a, student_b, teacher_a_proj, teacher_b_proj)
    return feature_distance(student_a, teacher_a_proj, temperature) + feature_distance(
        student_b, teacher_b_proj, temperature
    )


def kd_plain_with_grad(student: np.ndarray, teacher_proj: np.ndarray, temperature: float = 1.0):
    """One term of the plain loss with grads wrt both token matrices."""
    kl, ds, dt = token_kl_with_grad(student, teacher_proj, temperature)
    n = kl.size
    return float(kl.mean()), ds / n, dt / n


def _normalised(weights: np.ndarray) -> np.ndarray:
    total = weights.sum()
    return weights / total if total > 0 else np.zeros_like(weights)


def _branch(student, teacher_tokens, weights, net: MetaNet, temperature):
    w = _normalised(weights)
    proj, cache = net.body.forward(teacher_tokens + net.context)
    kl, ds, dt = token_kl_with_grad(student, proj, temperature)
    loss = float(w @ kl)
    layer_grads, d_in = net.body.backward(cache, dt * w[:, None])
    return loss, ds * w[:, None], (d_in.sum(axis=0), layer_grads)


def kd_depth_aware_with_grad(
    student: FeatureGrid,
    teacher: FeatureGrid,
    weights: DepthWeightPair,
    fg_net: MetaNet,
    bg_net: MetaNet,
    temperature: float = 1.0,
):
    """Depth-weighted distillation for one image.

    Returns ``(loss, d_student_tokens, fg_net_grads, bg_net_grads)`` where each
    net grad is ``(context_grad, layer_grads)``.
    """
    if (student.grid_h, student.grid_w) != (teacher.grid_h, teacher.grid_w):
        raise ValueError("student and teacher grids differ")
    if weights.d_plus.shape != (student.grid_h, student.grid_w):
        raise ValueError(
            f"weight grid {weights.d_plus.shape} does not match feature grid "
            f"{(student.grid_h, student.grid_w)}"
        )
    for net in (fg_net, bg_net):
        if net.in_dim != teacher.dim or net.out_dim != student.dim:
            raise ValueError("meta-net dimensions do not match the feature grids")
    s = student.tokens
    loss_fg, ds_fg, g_fg = _branch(s, teacher.tokens, weights.d_plus.ravel(), fg_net, temperature)
    loss_bg, ds_bg, g_bg = _branch(s, teacher.tokens, weights.d_minus.ravel(), bg_net, temperature)
    return loss_fg + loss_bg, ds_fg + ds_bg, g_fg, g_bg


def kd_loss_depth_aware(student, teacher, weights, fg_net, bg_net, temperature: float = 1.0) -> float:
    return kd_depth_aware_with_grad(student, teacher, weights, fg_net, bg_net, temperature)[0]
