"""Domain discriminator with a gradient reversal layer, plus a central
finite-difference checker for every hand-written gradient in the package."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import FeatureGrid
from .nn import TinyNet, flatten_grads, sigmoid

PROB_CLAMP = 1e-9
LABEL_A, LABEL_B = 0, 1


@dataclass(frozen=True)
class GrlConfig:
    lam: float = 1.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("GRL lambda must be nonnegative")


@dataclass(frozen=True)
class DomainBatch:
    """Images from domain A (label 0) and domain B (label 1)."""

    features_a: tuple[FeatureGrid, ...]
    features_b: tuple[FeatureGrid, ...]


@dataclass
class AdversarialResult:
    loss: float
    disc_grads: list  # per-layer (dW, db)
    encoder_grads_a: list[np.ndarray]  # reversed, per-token, one per grid
    encoder_grads_b: list[np.ndarray]
    probs_a: np.ndarray
    probs_b: np.ndarray

    @property
    def accuracy(self) -> float:
        correct = np.sum(self.probs_a < 0.5) + np.sum(self.probs_b >= 0.5)
        return float(correct / (self.probs_a.size + self.probs_b.size))


def grl_forward(x):
    return x


def grl_apply(upstream_gradient, cfg: GrlConfig):
    return -cfg.lam * np.asarray(upstream_gradient, dtype=np.float64)


def default_discriminator(dim: int, rng: np.random.Generator, hidden: int = 128) -> TinyNet:
    return TinyNet.init([dim, hidden, 1], ["relu", "sigmoid"], rng)


def discriminator_forward(h: TinyNet, token_summary) -> float:
    if h.layers[-1].activation != "sigmoid":
        raise ValueError("discriminator must end in a sigmoid")
    x = np.asarray(token_summary, dtype=np.float64).ravel()
    return float(h(x)[0, 0])


def summarize(grid: FeatureGrid) -> np.ndarray:
    return grid.tokens.mean(axis=0)


def adversarial_loss(h: TinyNet, batch: DomainBatch, cfg: GrlConfig = GrlConfig()) -> AdversarialResult:
    """Binary cross-entropy of the discriminator on pooled features.

    ``loss = -[mean_A ln(1 - h) + mean_B ln h]``. Discriminator grads descend
    this loss; encoder grads are the input-side grads after reversal.
    """
    n_a, n_b = len(batch.features_a), len(batch.features_b)
    if n_a == 0 or n_b == 0:
        raise ValueError("adversarial batch needs samples from both domains")
    grids = list(batch.features_a) + list(batch.features_b)
    x = grl_forward(np.stack([summarize(g) for g in grids]))
    prob, cache = h.forward(x)
    prob = prob[:, 0]
    pc = np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (prob > PROB_CLAMP) & (prob < 1.0 - PROB_CLAMP)
    pa, pb = pc[:n_a], pc[n_a:]
    loss = -(np.log1p(-pa).mean() + np.log(pb).mean())

    d_prob = np.concatenate([1.0 / (1.0 - pa) / n_a, -1.0 / pb / n_b]) * inside
    disc_grads, d_x = h.backward(cache, d_prob[:, None])
    enc = grl_apply(d_x, cfg)
    token_grads = [np.repeat(enc[i][None, :] / g.num_tokens, g.num_tokens, axis=0) for i, g in enumerate(grids)]
    return AdversarialResult(
        float(loss), disc_grads, token_grads[:n_a], token_grads[n_a:], prob[:n_a], prob[n_a:]
    )


def finite_diff_check(loss_fn, params, step: float = 1e-5) -> float:
    """Largest relative error between an analytic gradient and central differences.

    ``loss_fn(theta)`` returns ``(loss, grad)``; the analytic gradient is taken
    at ``params``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    theta = np.array(params, dtype=np.float64).ravel()
    loss0, analytic = loss_fn(theta.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if not np.isfinite(loss0) or analytic.shape != theta.shape:
        raise ValueError("loss must be finite and the gradient must match the parameter shape")
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + step
        up = loss_fn(theta.copy())[0]
        theta[i] = old - step
        down = loss_fn(theta.copy())[0]
        theta[i] = old
        if not (np.isfinite(up) and np.isfinite(down)):
            raise ValueError(f"non-finite loss while perturbing coordinate {i}")
        numeric[i] = (up - down) / (2.0 * step)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def discriminator_loss_fn(h: TinyNet, batch: DomainBatch, cfg: GrlConfig = GrlConfig()):
    """Closure over discriminator parameters for :func:`finite_diff_check`."""

    def fn(theta):
        res = adversarial_loss(h.with_parameters(theta), batch, cfg)
        return res.loss, flatten_grads(res.disc_grads)

    return fn, h.parameters()


def encoder_loss_fn(h: TinyNet, batch: DomainBatch, cfg: GrlConfig = GrlConfig(lam=1.0)):
    """Closure over all input tokens; reversal is undone so the grad is the true one."""
    grids = list(batch.features_a) + list(batch.features_b)
    shapes = [g.tokens.shape for g in grids]
    sizes = [int(np.prod(s)) for s in shapes]
    n_a = len(batch.features_a)

    def fn(theta):
        parts, pos = [], 0
        for g, s, n in zip(grids, shapes, sizes):
            parts.append(g.with_tokens(theta[pos:pos + n].reshape(s)))
            pos += n
        res = adversarial_loss(h, DomainBatch(tuple(parts[:n_a]), tuple(parts[n_a:])), cfg)
        grad = np.concatenate([t.ravel() for t in res.encoder_grads_a + res.encoder_grads_b])
        return res.loss, grad / -cfg.lam

    return fn, np.concatenate([g.tokens.ravel() for g in grids])


@dataclass(frozen=True)
class ConfusionOutcome:
    disc_acc_before: float
    disc_acc_after: float
    probe_acc: float


def confusion_game(
    steps: int = 500,
    seed: int = 0,
    lam: float = 1.0,
    n_per_domain: int = 32,
    dim: int = 4,
    hidden: int = 16,
    lr_disc: float = 0.05,
    lr_enc: float = 0.2,
    disc_decay: float = 0.3,
    warmup: int = 100,
) -> ConfusionOutcome:
    """Two linearly separable domains sharing a binary content label.

    A linear encoder is trained through the GRL against the discriminator and,
    jointly, for a logistic content probe. The discriminator is first warmed
    up alone. ``disc_decay`` is an L2 pull on the discriminator weights:
    without it simultaneous descent on this near-bilinear game spirals
    outward instead of settling.
    """
    rng = np.random.default_rng(seed)
    n = n_per_domain
    label = rng.choice([-1.0, 1.0], size=2 * n)
    domain = np.r_[-np.ones(n), np.ones(n)]
    raw = rng.normal(0.0, 0.2, (2 * n, dim))
    raw[:, 0] += label
    raw[:, 1] += domain
    enc = np.eye(dim)
    disc = default_discriminator(dim, rng, hidden)
    w, b = np.zeros(dim), 0.0
    cfg = GrlConfig(lam)

    def batch(feats):
        grids = [FeatureGrid(1, 1, feats[i:i + 1]) for i in range(2 * n)]
        return DomainBatch(tuple(grids[:n]), tuple(grids[n:]))

    def decayed(grads, decay):
        return [(gw + decay * layer.weight, gb) for (gw, gb), layer in zip(grads, disc.layers)]

    for _ in range(warmup):
        disc.apply_update(adversarial_loss(disc, batch(raw @ enc), cfg).disc_grads, 0.2)
    before = adversarial_loss(disc, batch(raw @ enc), cfg).accuracy

    target = (label > 0).astype(np.float64)
    for _ in range(steps):
        feats = raw @ enc
        res = adversarial_loss(disc, batch(feats), cfg)
        disc.apply_update(decayed(res.disc_grads, disc_decay), lr_disc)
        g_feat = np.vstack(res.encoder_grads_a + res.encoder_grads_b)
        g_logit = (sigmoid(feats @ w + b) - target) / len(target)
        w = w - lr_enc * (feats.T @ g_logit)
        b -= lr_enc * g_logit.sum()
        enc -= lr_enc * (raw.T @ (g_feat + np.outer(g_logit, w)))

    feats = raw @ enc
    after = adversarial_loss(disc, batch(feats), cfg).accuracy
    probe = float(np.mean((feats @ w + b > 0) == (label > 0)))
    return ConfusionOutcome(before, after, probe)
