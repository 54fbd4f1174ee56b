"""Desk-scale end-to-end training loop wiring every loss together.

A linear patch encoder stands in for the student backbone, a frozen random
network for the depth teacher, and a per-token linear decoder (with prompt
embeddings added as a bias query) for the mask head. Everything is updated by
plain gradient descent so runs are bit-reproducible.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .adversarial import DomainBatch, GrlConfig, adversarial_loss, default_discriminator
from .compositor import CompositePair, composite_alpha
from .depth_distill import DepthMap, MetaNet, compute_depth_weights, kd_depth_aware_with_grad
from .fg_align import (
    ForegroundTokenSet,
    NoForegroundError,
    SinkhornDivergence,
    exchange_indices,
    filter_foreground_tokens,
    ot_loss_with_grad,
    patchify_mask,
)
from .grid import FeatureGrid
from .nn import Layer, TinyNet, sigmoid
from .pred_loss import LossWeights, head_loss_with_grad, total_loss

DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- prompts

@dataclass(frozen=True)
class PromptEmbedding:
    vector: np.ndarray
    kind: str  # point | box | none | learnable-context


def _fourier(coords: np.ndarray, n_freqs: int) -> np.ndarray:
    freqs = (2.0 ** np.arange(n_freqs)) * np.pi
    ang = coords[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).ravel()


def _mixing_matrix(n_in: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, dim))


def prompt_embed(prompt, dim: int, n_freqs: int = 6, seed: int = 0) -> PromptEmbedding:
    """Sinusoidal encoding of normalised prompt coordinates, mixed to ``dim``.

    ``prompt`` is ``None`` / ``("none",)``, ``("point", x, y)`` or
    ``("box", x0, y0, x1, y1)``. A missing prompt embeds to exact zeros.
    """
    if prompt is None or prompt[0] == "none":
        return PromptEmbedding(np.zeros(dim), "none")
    kind, *coords = prompt
    c = np.asarray(coords, dtype=np.float64)
    if np.any(c < 0) or np.any(c > 1):
        raise ValueError(f"prompt coordinates must be normalised to [0, 1], got {coords}")
    if kind == "point" and c.size == 2:
        enc = _fourier(c, n_freqs)
    elif kind == "box" and c.size == 4:
        enc = 0.5 * (_fourier(c[:2], n_freqs) + _fourier(c[2:], n_freqs))
    else:
        raise ValueError(f"malformed prompt {prompt!r}")
    return PromptEmbedding(enc @ _mixing_matrix(enc.size, dim, seed), kind)


# ---------------------------------------------------------------- encoder

@dataclass
class ToyEncoder:
    patch_size: int
    net: TinyNet  # single linear layer: flattened patch -> feature dim

    @classmethod
    def init(cls, patch_size: int, dim: int, rng: np.random.Generator, channels: int = 3, gain: float = 1.0):
        n_in = patch_size * patch_size * channels
        net = TinyNet([Layer(rng.normal(0.0, gain / math.sqrt(n_in), (n_in, dim)), np.zeros(dim), "none")])
        return cls(patch_size, net)

    @property
    def dim(self) -> int:
        return self.net.out_dim


def image_patches(image, patch_size: int) -> tuple[np.ndarray, int, int]:
    """Flatten non-overlapping patches; pixel values are centred to [-0.5, 0.5]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.dtype != np.float64 or img.max() > 1.0:
        img = img / 255.0
    h, w, c = img.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    patches = img.reshape(gh, patch_size, gw, patch_size, c).transpose(0, 2, 1, 3, 4)
    return patches.reshape(gh * gw, -1) - 0.5, gh, gw


def encode_patches(image, enc: ToyEncoder) -> FeatureGrid:
    patches, gh, gw = image_patches(image, enc.patch_size)
    if patches.shape[1] != enc.net.in_dim:
        raise ValueError("image channels do not match the encoder")
    return FeatureGrid(gh, gw, enc.net(patches))


# ---------------------------------------------------------------- data

@dataclass(frozen=True)
class ToySample:
    pair: CompositePair
    mask: np.ndarray  # (H, W) binary
    depth: DepthMap
    prompt: tuple


def _blob_alpha(size: int, rng: np.random.Generator):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = rng.uniform(0.35, 0.65, 2) * size
    ry, rx = rng.uniform(0.18, 0.3, 2) * size
    alpha = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.float64)
    return alpha, (float(cx / size), float(cy / size))


def _synthetic_background(size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform([110, 20, 20], [160, 70, 70])
    noise = rng.normal(0.0, 25.0, (size, size, 3))
    return np.clip(base + noise, 0, 255).astype(np.uint8)


def _natural_background(size: int, rng: np.random.Generator) -> np.ndarray:
    t = np.linspace(0.0, 1.0, size)
    ramp = np.add.outer(t * rng.uniform(-1, 1), t * rng.uniform(-1, 1))[..., None]
    base = rng.uniform([20, 40, 100], [60, 80, 150])
    return np.clip(base + 25.0 * ramp, 0, 255).astype(np.uint8)


def make_blob_dataset(n_pairs: int = 8, size: int = 16, seed: int = 0) -> list[ToySample]:
    """Pairs sharing an elliptical foreground; A over noisy synthetic
    backgrounds, B over smooth natural-looking ones."""
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(n_pairs):
        alpha, center = _blob_alpha(size, rng)
        colour = rng.uniform(190, 255, 3)
        fg = np.broadcast_to(colour, (size, size, 3)).astype(np.uint8)
        img_a = composite_alpha(fg, alpha, _synthetic_background(size, rng))
        img_b = composite_alpha(fg, alpha, _natural_background(size, rng))
        pair = CompositePair(img_a, img_b, alpha, f"synthetic-{k}", f"natural-{k}", seed)
        depth = DepthMap.normalized(np.where(alpha > 0.5, 0.8, 0.1))
        samples.append(ToySample(pair, alpha, depth, ("point",) + center))
    return samples


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 1e-2
    seed: int = 0
    lam: float = 1.0
    exchange_ratio: float = 0.25
    delta: float = 0.25
    sinkhorn_reg: float = 0.05
    sinkhorn_max_iters: int = 500
    sinkhorn_tol: float = 1e-6
    temperature: float = 1.0
    task: str = "dis"
    patch_size: int = 4
    feature_dim: int = 16
    teacher_dim: int = 16
    meta_hidden: int = 32
    disc_hidden: int = 128
    encoder_gain: float = 2.0
    head_gain: float = 12.0
    w_kd: float = 1.0
    w_adv: float = 1.0
    w_ot: float = 1.0
    w_head: float = 1.0

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_kd, self.w_adv, self.w_ot, self.w_head)


@dataclass
class ToyModel:
    encoder: ToyEncoder
    teacher: TinyNet
    fg_net: MetaNet
    bg_net: MetaNet
    disc: TinyNet
    dec_weight: np.ndarray  # (dim, patch_size**2)
    dec_bias: np.ndarray
    context_query: np.ndarray  # learnable-context prompt

    @classmethod
    def init(cls, cfg: TrainConfig, rng: np.random.Generator, channels: int = 3):
        p, d = cfg.patch_size, cfg.feature_dim
        n_in = p * p * channels
        teacher = TinyNet.init([n_in, 2 * cfg.teacher_dim, cfg.teacher_dim], ["relu", "none"], rng)
        return cls(
            encoder=ToyEncoder.init(p, d, rng, channels, cfg.encoder_gain),
            teacher=teacher,
            fg_net=MetaNet.init(cfg.teacher_dim, cfg.meta_hidden, d, rng),
            bg_net=MetaNet.init(cfg.teacher_dim, cfg.meta_hidden, d, rng),
            disc=default_discriminator(d, rng, cfg.disc_hidden),
            dec_weight=rng.normal(0.0, 1.0 / math.sqrt(d), (d, p * p)),
            dec_bias=np.zeros(p * p),
            context_query=np.zeros(d),
        )

    def parameter_arrays(self) -> list[np.ndarray]:
        return [
            self.encoder.net.parameters(), self.fg_net.parameters(), self.bg_net.parameters(),
            self.disc.parameters(), self.dec_weight, self.dec_bias, self.context_query,
        ]

    def blown_up(self, limit: float = DIVERGENCE_LIMIT) -> bool:
        return any(not np.all(np.isfinite(a)) or np.abs(a).max() > limit for a in self.parameter_arrays())


def cluster_alignment_stat(fg_a: ForegroundTokenSet, fg_b: ForegroundTokenSet) -> float:
    """Centroid distance between the two token clouds over their mean scatter."""
    a = np.asarray(getattr(fg_a, "tokens", fg_a), dtype=np.float64)
    b = np.asarray(getattr(fg_b, "tokens", fg_b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("token sets must have equal size")
    if a.shape[0] < 2:
        raise ValueError("cluster statistic needs at least two tokens per set")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    gap = np.linalg.norm(ca - cb)
    scatter = 0.5 * (np.linalg.norm(a - ca, axis=1).mean() + np.linalg.norm(b - cb, axis=1).mean())
    if scatter == 0.0:
        return 0.0 if gap == 0.0 else math.inf
    return float(gap / scatter)


def _decode(tokens, model: ToyModel, prompt_vec, gh, gw, p, gain):
    query = tokens + prompt_vec + model.context_query
    logits = gain * (query @ model.dec_weight) + model.dec_bias
    prob = sigmoid(logits)
    alpha = prob.reshape(gh, gw, p, p).transpose(0, 2, 1, 3).reshape(gh * p, gw * p)
    return alpha, query, prob


def _alpha_grad_to_patches(grad_alpha, gh, gw, p):
    return grad_alpha.reshape(gh, p, gw, p).transpose(0, 2, 1, 3).reshape(gh * gw, p * p)


@dataclass
class _Prepared:
    patches_a: np.ndarray
    patches_b: np.ndarray
    teacher_a: FeatureGrid
    teacher_b: FeatureGrid
    weights: object
    patch_mask: object
    prompt_vec: np.ndarray
    mask: np.ndarray
    gh: int
    gw: int


def _prepare(dataset, model: ToyModel, cfg: TrainConfig):
    out = []
    for s in dataset:
        pa, gh, gw = image_patches(s.pair.image_a, cfg.patch_size)
        pb, _, _ = image_patches(s.pair.image_b, cfg.patch_size)
        out.append(_Prepared(
            pa, pb,
            FeatureGrid(gh, gw, model.teacher(pa)),
            FeatureGrid(gh, gw, model.teacher(pb)),
            compute_depth_weights(s.depth, cfg.delta, (gh, gw)),
            patchify_mask(s.mask, (gh, gw)),
            prompt_embed(s.prompt, cfg.feature_dim, seed=cfg.seed).vector,
            s.mask, gh, gw,
        ))
    return out


def alignment_stat(model: ToyModel, prepared) -> float:
    fa, fb = [], []
    for item in prepared:
        idx = np.flatnonzero(item.patch_mask.values.ravel() > 0)
        fa.append(model.encoder.net(item.patches_a)[idx])
        fb.append(model.encoder.net(item.patches_b)[idx])
    return cluster_alignment_stat(np.concatenate(fa), np.concatenate(fb))


def train_step(model: ToyModel, prepared, cfg: TrainConfig, step: int) -> dict:
    """One full-batch forward/backward/update; returns the logged record."""
    w = cfg.weights
    p = cfg.patch_size
    n = len(prepared)
    enc = model.encoder.net
    feats_a = [enc(it.patches_a) for it in prepared]
    feats_b = [enc(it.patches_b) for it in prepared]
    d_a = [np.zeros_like(f) for f in feats_a]
    d_b = [np.zeros_like(f) for f in feats_b]

    # depth-aware distillation on the unexchanged student features
    l_kd = 0.0
    fg_acc = bg_acc = None
    for i, it in enumerate(prepared):
        for feats, teach, d in ((feats_a, it.teacher_a, d_a), (feats_b, it.teacher_b, d_b)):
            grid = FeatureGrid(it.gh, it.gw, feats[i])
            loss, ds, gfg, gbg = kd_depth_aware_with_grad(
                grid, teach, it.weights, model.fg_net, model.bg_net, cfg.temperature
            )
            l_kd += loss / n
            d[i] += w.kd * ds / n
            fg_acc = _acc(fg_acc, gfg, w.kd / n)
            bg_acc = _acc(bg_acc, gbg, w.kd / n)

    # token exchange feeds the discriminator, OT and the decoder
    swaps = [exchange_indices(f.shape[0], cfg.exchange_ratio, cfg.seed * 1_000_003 + step * 1009 + i)
             for i, f in enumerate(feats_a)]
    ex_a, ex_b = [], []
    for fa, fb, idx in zip(feats_a, feats_b, swaps):
        xa, xb = fa.copy(), fb.copy()
        xa[idx], xb[idx] = fb[idx], fa[idx]
        ex_a.append(xa)
        ex_b.append(xb)
    dex_a = [np.zeros_like(f) for f in ex_a]
    dex_b = [np.zeros_like(f) for f in ex_b]

    grids_a = tuple(FeatureGrid(it.gh, it.gw, x) for it, x in zip(prepared, ex_a))
    grids_b = tuple(FeatureGrid(it.gh, it.gw, x) for it, x in zip(prepared, ex_b))
    adv = adversarial_loss(model.disc, DomainBatch(grids_a, grids_b), GrlConfig(cfg.lam))
    for i in range(n):
        dex_a[i] += w.adv * adv.encoder_grads_a[i]
        dex_b[i] += w.adv * adv.encoder_grads_b[i]

    l_ot = 0.0
    for i, it in enumerate(prepared):
        try:
            fa = filter_foreground_tokens(grids_a[i], it.patch_mask)
            fb = filter_foreground_tokens(grids_b[i], it.patch_mask)
        except NoForegroundError:
            continue
        loss, ga, gb, _ = ot_loss_with_grad(fa, fb, cfg.sinkhorn_reg, cfg.sinkhorn_max_iters, cfg.sinkhorn_tol)
        l_ot += loss / n
        dex_a[i][fa.indices] += w.ot * ga / n
        dex_b[i][fb.indices] += w.ot * gb / n

    l_head = 0.0
    g_dec_w = np.zeros_like(model.dec_weight)
    g_dec_b = np.zeros_like(model.dec_bias)
    g_ctx = np.zeros_like(model.context_query)
    for i, it in enumerate(prepared):
        for x, dx in ((ex_a[i], dex_a[i]), (ex_b[i], dex_b[i])):
            alpha, query, prob = _decode(x, model, it.prompt_vec, it.gh, it.gw, p, cfg.head_gain)
            loss, g_alpha, _ = head_loss_with_grad(alpha, it.mask, cfg.task)
            l_head += loss / n
            g_logits = _alpha_grad_to_patches(g_alpha, it.gh, it.gw, p) * prob * (1 - prob) * (w.head / n)
            g_dec_w += cfg.head_gain * (query.T @ g_logits)
            g_dec_b += g_logits.sum(axis=0)
            g_query = cfg.head_gain * (g_logits @ model.dec_weight.T)
            g_ctx += g_query.sum(axis=0)
            dx += g_query

    # undo the exchange so each gradient reaches the encoder pass that produced it
    for i, idx in enumerate(swaps):
        ga, gb = dex_a[i].copy(), dex_b[i].copy()
        ga[idx], gb[idx] = dex_b[i][idx], dex_a[i][idx]
        d_a[i] += ga
        d_b[i] += gb

    g_enc_w = sum(it.patches_a.T @ da + it.patches_b.T @ db for it, da, db in zip(prepared, d_a, d_b))
    g_enc_b = sum(da.sum(axis=0) + db.sum(axis=0) for da, db in zip(d_a, d_b))

    total = total_loss(l_kd, adv.loss, l_ot, l_head, w)
    if not math.isfinite(total) or total > DIVERGENCE_LIMIT:
        raise TrainingDiverged(f"training diverged at step {step} (total loss {total})")
    record = {
        "step": step,
        "l_kd": l_kd,
        "l_adv": adv.loss,
        "l_ot": l_ot,
        "l_head": l_head,
        "total": total,
        "disc_acc": adv.accuracy,
        "align_stat": alignment_stat(model, prepared),
    }

    lr = cfg.lr
    enc.apply_update([(g_enc_w, g_enc_b)], lr)
    model.fg_net.apply_update(fg_acc, lr)
    model.bg_net.apply_update(bg_acc, lr)
    model.disc.apply_update([(w.adv * gw_, w.adv * gb_) for gw_, gb_ in adv.disc_grads], lr)
    model.dec_weight -= lr * g_dec_w
    model.dec_bias -= lr * g_dec_b
    model.context_query -= lr * g_ctx
    return record


def _acc(acc, grads, scale):
    ctx, layers = grads
    if acc is None:
        return ctx * scale, [(gw * scale, gb * scale) for gw, gb in layers]
    a_ctx, a_layers = acc
    return a_ctx + ctx * scale, [(aw + gw * scale, ab + gb * scale) for (aw, ab), (gw, gb) in zip(a_layers, layers)]


@dataclass
class TrainLog:
    config: dict
    records: list[dict] = field(default_factory=list)
    final: dict | None = None

    def to_jsonl(self) -> str:
        import json

        return "".join(json.dumps(r, sort_keys=False) + "\n" for r in self.records)


def evaluate(model: ToyModel, prepared, cfg: TrainConfig) -> dict:
    """Loss-free snapshot: discriminator accuracy and alignment on unexchanged features."""
    enc = model.encoder.net
    grids_a = tuple(FeatureGrid(it.gh, it.gw, enc(it.patches_a)) for it in prepared)
    grids_b = tuple(FeatureGrid(it.gh, it.gw, enc(it.patches_b)) for it in prepared)
    adv = adversarial_loss(model.disc, DomainBatch(grids_a, grids_b), GrlConfig(cfg.lam))
    return {"disc_acc": adv.accuracy, "align_stat": alignment_stat(model, prepared)}


def run_training(dataset, cfg: TrainConfig = TrainConfig(), model: ToyModel | None = None):
    """Train on ``dataset`` and return ``(TrainLog, model)``."""
    if cfg.steps > 0 and len(dataset) < 8:
        raise ValueError("toy training needs at least 8 pairs")
    shapes = {s.pair.image_a.shape for s in dataset} | {s.pair.image_b.shape for s in dataset}
    if len(shapes) > 1:
        raise ValueError("all images must share one size")
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = ToyModel.init(cfg, rng)
    log = TrainLog(asdict(cfg))
    if cfg.steps == 0:
        return log, model
    prepared = _prepare(dataset, model, cfg)
    for step in range(cfg.steps):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                log.records.append(train_step(model, prepared, cfg, step))
        except (ValueError, SinkhornDivergence) as exc:
            # runaway parameters surface as non-finite features deep inside a loss
            if model.blown_up():
                raise TrainingDiverged(f"training diverged at step {step} ({exc})") from exc
            raise
    log.final = evaluate(model, prepared, cfg)
    return log, model
