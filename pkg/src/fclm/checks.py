"""Self-contained verification suite: oracle agreement, gradient checks,
contract identities. Shared by the ``selftest`` / ``gradcheck`` commands and
the acceptance tests."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics_dis as md
from . import metrics_matting as mm
from .adversarial import (
    DomainBatch,
    GrlConfig,
    adversarial_loss,
    discriminator_loss_fn,
    encoder_loss_fn,
    finite_diff_check,
    grl_apply,
    grl_forward,
)
from .compositor import composite_alpha, make_pair
from .depth_distill import DepthMap, MetaNet, compute_depth_weights, kd_depth_aware_with_grad, kd_plain_with_grad
from .fg_align import (
    ForegroundTokenSet,
    cosine_cost_backward,
    cost_matrix_cosine,
    entropic_objective,
    ot_loss_with_grad,
    sinkhorn_plan,
)
from .grid import FeatureGrid
from .nn import TinyNet
from .oracles import flood_fill_connectivity_error, lp_permutation_optimum, naive_grad_error
from .pred_loss import (
    bce_loss_with_grad,
    iou_loss_with_grad,
    l1_matte_loss_with_grad,
    laplacian_pyramid_loss_with_grad,
)

GRAD_TOL = 1e-4
GRAD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    values: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(name, fn, budget: float | None = None, **kw) -> CheckResult:
    t0 = time.perf_counter()
    passed, detail, values = fn(**kw)
    res = CheckResult(name, passed, detail, values, time.perf_counter() - t0)
    if budget is not None and res.seconds > budget:
        res.passed = False
        res.detail += f"; runtime {res.seconds:.2f}s exceeds {budget}s"
    return res


# ------------------------------------------------------------ 1. Sinkhorn vs LP

def sinkhorn_lp(instances: int = 200, dim: int = 8, reg: float = 1e-3, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst_gap = worst_resid = 0.0
    for i in range(instances):
        k = (2, 3, 4)[i % 3]
        a = ForegroundTokenSet(rng.normal(size=(k, dim)), np.arange(k))
        b = ForegroundTokenSet(rng.normal(size=(k, dim)), np.arange(k))
        loss, _, _, plan = ot_loss_with_grad(a, b, reg=reg, max_iters=500, marginal_tol=1e-6)
        worst_gap = max(worst_gap, abs(loss - lp_permutation_optimum(plan.cost)))
        worst_resid = max(worst_resid, plan.row_residual, plan.col_residual)
    ok = worst_gap <= 5e-3 and worst_resid <= 1e-6
    return ok, f"max |ot - LP| = {worst_gap:.2e}, max marginal residual = {worst_resid:.2e}", {
        "max_gap": worst_gap, "max_residual": worst_resid}


# ------------------------------------------------------------ 2. gradients

def _kd_plain_case(rng):
    p, d = 6, 5
    shapes = [(p, d)] * 4

    def fn(theta):
        sa, sb, ta, tb = np.split(theta, 4)
        la, gsa, gta = kd_plain_with_grad(sa.reshape(p, d), ta.reshape(p, d))
        lb, gsb, gtb = kd_plain_with_grad(sb.reshape(p, d), tb.reshape(p, d))
        return la + lb, np.concatenate([gsa.ravel(), gsb.ravel(), gta.ravel(), gtb.ravel()])

    return fn, rng.normal(size=sum(np.prod(s) for s in shapes))


def _kd_depth_case(rng):
    gh, gw, d_t, d_s, hid = 2, 3, 4, 5, 6
    student = FeatureGrid(gh, gw, rng.normal(size=(gh * gw, d_s)))
    teacher = FeatureGrid(gh, gw, rng.normal(size=(gh * gw, d_t)))
    weights = compute_depth_weights(DepthMap(rng.uniform(size=(gh * 2, gw * 2))), 0.25, (gh, gw))
    fg = MetaNet.init(d_t, hid, d_s, rng)
    bg = MetaNet.init(d_t, hid, d_s, rng)
    n_s, n_fg = student.tokens.size, fg.parameters().size

    def fn(theta):
        s = student.with_tokens(theta[:n_s].reshape(student.tokens.shape))
        f = fg.with_parameters(theta[n_s:n_s + n_fg])
        b = bg.with_parameters(theta[n_s + n_fg:])
        loss, ds, gf, gb = kd_depth_aware_with_grad(s, teacher, weights, f, b)
        flat = [ds.ravel()]
        for ctx, layers in (gf, gb):
            flat.append(ctx)
            flat.extend(np.concatenate([gw_.ravel(), gb_]) for gw_, gb_ in layers)
        return loss, np.concatenate(flat)

    return fn, np.concatenate([student.tokens.ravel(), fg.parameters(), bg.parameters()])


def _adv_batch(rng, dim=4):
    def grid():
        return FeatureGrid(2, 2, rng.normal(size=(4, dim)))

    return DomainBatch((grid(), grid(), grid()), (grid(), grid(), grid()))


def _adv_disc_case(rng):
    h = TinyNet.init([4, 8, 1], ["relu", "sigmoid"], rng)
    return discriminator_loss_fn(h, _adv_batch(rng))


def _adv_encoder_case(rng):
    h = TinyNet.init([4, 8, 1], ["relu", "sigmoid"], rng)
    return encoder_loss_fn(h, _adv_batch(rng), GrlConfig(1.0))


def _ot_case(rng, reg: float = 0.5):
    k = int(rng.integers(2, 5))
    dim = 4

    def fn(theta):
        x, y = theta[:k * dim].reshape(k, dim), theta[k * dim:].reshape(k, dim)
        cost = cost_matrix_cosine(ForegroundTokenSet(x, np.arange(k)), ForegroundTokenSet(y, np.arange(k)))
        plan = sinkhorn_plan(cost, reg=reg, max_iters=5000, marginal_tol=1e-13)
        dx, dy = cosine_cost_backward(x, y, plan.pi)
        return entropic_objective(plan), np.concatenate([dx.ravel(), dy.ravel()])

    return fn, rng.normal(size=2 * k * dim)


def _image_case(loss_with_grad, shape, pred_sampler, gt_sampler):
    def make(rng):
        gt = gt_sampler(rng, shape)

        def fn(theta):
            loss, grad = loss_with_grad(theta.reshape(shape), gt)
            return loss, grad.ravel()

        return fn, pred_sampler(rng, shape).ravel()

    return make


def _uniform(lo, hi):
    return lambda rng, shape: rng.uniform(lo, hi, shape)


def _binary(rng, shape):
    return (rng.uniform(size=shape) > 0.5).astype(np.float64)


GRADIENT_CASES = {
    "kd_plain": _kd_plain_case,
    "kd_depth_aware": _kd_depth_case,
    "adv_discriminator": _adv_disc_case,
    "adv_encoder": _adv_encoder_case,
    "ot_envelope": _ot_case,
    "l1": _image_case(l1_matte_loss_with_grad, (6, 6), _uniform(0, 1), _uniform(0, 1)),
    "laplacian": _image_case(laplacian_pyramid_loss_with_grad, (16, 16), _uniform(0, 1), _uniform(0, 1)),
    "bce": _image_case(bce_loss_with_grad, (6, 6), _uniform(0.05, 0.95), _binary),
    "iou": _image_case(iou_loss_with_grad, (6, 6), _uniform(0, 1), _binary),
}


def gradient_errors(instances: int = 20, seed: int = 0, corrupt: str | None = None) -> dict[str, float]:
    """Max relative finite-difference error per loss over seeded instances.

    ``corrupt`` names a case whose analytic gradient gets perturbed; used to
    prove the harness catches broken gradients.
    """
    out = {}
    for k, (name, make) in enumerate(GRADIENT_CASES.items()):
        rng = np.random.default_rng([seed, k])
        worst = 0.0
        for _ in range(instances):
            fn, theta = make(rng)
            if name == corrupt:
                fn = _corrupted(fn)
            worst = max(worst, finite_diff_check(fn, theta, GRAD_STEP))
        out[name] = worst
    return out


def _corrupted(fn):
    def wrapped(theta):
        loss, grad = fn(theta)
        grad = grad.copy()
        grad[0] = grad[0] * 1.01 + 1e-3
        return loss, grad

    return wrapped


def gradient_suite(instances: int = 20, seed: int = 0, corrupt: str | None = None):
    errs = gradient_errors(instances, seed, corrupt)
    bad = [k for k, v in errs.items() if not v <= GRAD_TOL]
    detail = ", ".join(f"{k}={v:.1e}" for k, v in errs.items())
    if bad:
        detail = f"failing: {', '.join(bad)}; " + detail
    return not bad, detail, errs


# ------------------------------------------------------------ 3. depth weights

def depth_contract(instances: int = 50, seed: int = 0, delta: float = 0.25):
    rng = np.random.default_rng(seed)
    for _ in range(instances):
        depth = DepthMap(rng.uniform(size=(8, 8)) * rng.uniform(0.2, 1.0))
        w = compute_depth_weights(depth, delta)
        if np.any(w.d_plus * w.d_minus != 0):
            return False, "d+ * d- != 0 somewhere", {}
        if not np.array_equal(w.d_plus > 0, depth.values > delta):
            return False, "d+ > 0 does not coincide with depth > delta", {}
    w = compute_depth_weights(DepthMap(np.array([[0.8, 0.2], [0.25, 1.0]])), delta, (2, 2))
    exp_plus = np.array([[0.8, 0.0], [0.0, 1.0]])
    exp_minus = np.array([[0.0, 0.2], [0.0, 0.0]])
    if not (np.allclose(w.d_plus, exp_plus, atol=1e-15) and np.allclose(w.d_minus, exp_minus, atol=1e-15)):
        return False, f"hand example mismatch: d+={w.d_plus.tolist()} d-={w.d_minus.tolist()}", {}
    return True, f"partition holds on {instances} random maps; 2x2 hand example exact", {}


# ------------------------------------------------------------ 4. GRL

def grl_contract(seed: int = 0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 7))
    if grl_forward(x) is not x:
        return False, "forward is not the identity", {}
    g = rng.normal(size=7)
    for lam in (0.0, 0.5, 1.0, 2.0):
        if not np.array_equal(grl_apply(g, GrlConfig(lam)), -lam * g):
            return False, f"backward != -lambda * g at lambda={lam}", {}
    h = TinyNet.init([3, 6, 1], ["relu", "sigmoid"], rng)
    batch = DomainBatch(
        (FeatureGrid(2, 2, rng.normal(size=(4, 3))),), (FeatureGrid(2, 2, rng.normal(size=(4, 3))),)
    )
    base = adversarial_loss(h, batch, GrlConfig(1.0))
    for c in (0.0, 0.5, 2.0):
        res = adversarial_loss(h, batch, GrlConfig(c))
        for e1, e0 in zip(res.encoder_grads_a + res.encoder_grads_b, base.encoder_grads_a + base.encoder_grads_b):
            if not np.array_equal(e1, c * e0):
                return False, f"encoder grads not exactly linear in lambda (c={c})", {}
        for (w1, b1), (w0, b0) in zip(res.disc_grads, base.disc_grads):
            if not (np.array_equal(w1, w0) and np.array_equal(b1, b0)):
                return False, "discriminator grads depend on lambda", {}
    return True, "identity forward, -lambda backward, exact linearity", {}


# ------------------------------------------------------------ 5. metric identities

def metric_identities(seed: int = 0, count: int = 5):
    rng = np.random.default_rng(seed)
    worst = {}

    def note(key, val):
        worst[key] = max(worst.get(key, 0.0), val)

    for _ in range(count):
        matte = rng.uniform(size=(24, 24))
        matte[rng.uniform(size=matte.shape) < 0.3] = 0.0
        r = mm.evaluate_matte(matte, matte)
        for key in ("sad", "mse", "mad", "grad", "conn"):
            note(key, abs(getattr(r, key)))
        inst = [matte * (rng.uniform(size=matte.shape) > 0.5), np.clip(matte * 1.5, 0, 1)]
        for q in ("mse", "mad", "grad", "conn"):
            note(f"imq_{q}", abs(mm.imq(inst, inst, q) - 100.0))

        gt = np.zeros((32, 32))
        y0, x0 = rng.integers(4, 12, 2)
        gt[y0:y0 + 12, x0:x0 + 14] = 1.0
        d = md.evaluate_dis(gt, gt)
        note("maxF", abs(d.max_f - 1.0))
        note("weighted_F", abs(d.weighted_f - 1.0))
        note("MAE", d.mae)
        note("S_measure", abs(d.s_measure - 1.0))
        note("E_measure", abs(d.e_measure - 1.0))
        note("HCE", d.hce)
    ok = all(v <= 1e-6 for v in worst.values())
    bad = [k for k, v in worst.items() if v > 1e-6]
    return ok, "all identities hold" if ok else f"violations: {bad}", worst


# ------------------------------------------------------------ 6. metric oracles

def conn_cases(seed: int = 0, count: int = 20):
    """Constructed 8x8 mattes: blobs, stray pixels, split components, ramps."""
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(count):
        gt = np.zeros((8, 8))
        gt[2:6, 1 + i % 3:5 + i % 3] = rng.uniform(0.5, 1.0)
        pred = gt.copy()
        kind = i % 4
        if kind == 0:
            pred[rng.integers(0, 8), 7] = rng.uniform(0.3, 1.0)
        elif kind == 1:
            pred[3, :] = 0.0
        elif kind == 2:
            pred = np.clip(gt + rng.normal(0, 0.2, gt.shape), 0, 1)
        else:
            pred = np.clip(np.linspace(0, 1, 8)[None, :] * gt + rng.uniform(0, 0.3, gt.shape), 0, 1)
            gt = np.clip(gt + rng.uniform(0, 0.3, gt.shape) * (rng.uniform(size=gt.shape) > 0.7), 0, 1)
        cases.append((pred, gt))
    return cases


def metric_oracles(seed: int = 0):
    rng = np.random.default_rng(seed)
    grad_gap = 0.0
    for _ in range(50):
        p, g = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
        grad_gap = max(grad_gap, abs(mm.grad_error(p, g)[1] - naive_grad_error(p, g)))
    conn_gap = 0.0
    for p, g in conn_cases(seed):
        conn_gap = max(conn_gap, abs(mm.connectivity_error(p, g)[1] - flood_fill_connectivity_error(p, g)))
    f_hand = md.max_f_measure(np.array([[0.0, 1.0], [1.0, 1.0]]), np.array([[1, 0], [0, 0]]))
    ok = grad_gap <= 1e-9 and conn_gap <= 1e-9 and abs(f_hand - 0.3023) <= 1e-4
    return ok, (f"grad vs naive conv {grad_gap:.1e}, conn vs flood fill {conn_gap:.1e}, "
                f"maxF hand case {f_hand:.4f}"), {"grad_gap": grad_gap, "conn_gap": conn_gap, "max_f_hand": f_hand}


# ------------------------------------------------------------ 7. compositor

def compositor_algebra(seed: int = 0):
    rng = np.random.default_rng(seed)
    one = composite_alpha(np.full((1, 1, 3), 200, np.uint8), np.array([[0.5]]), np.full((1, 1, 3), 100, np.uint8))
    if int(one[0, 0, 0]) != 150:
        return False, f"alpha=0.5 case gave {int(one[0, 0, 0])}", {}
    h, w = 40, 48
    fg = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    alpha = rng.uniform(size=(h, w))
    alpha[rng.uniform(size=(h, w)) < 0.3] = 1.0
    alpha[rng.uniform(size=(h, w)) < 0.2] = 0.0
    pool = [(f"bg{i}", rng.integers(0, 256, (h + 8, w + 6, 3), dtype=np.uint8)) for i in range(4)]
    pair = make_pair(fg, alpha, pool, seed)
    lookup = dict(pool)
    if not np.array_equal(pair.image_a[alpha == 1], pair.image_b[alpha == 1]):
        return False, "alpha=1 pixels differ across the pair", {}
    crop = lambda img: img[4:4 + h, 3:3 + w].astype(np.float64)
    expected = (1 - alpha)[..., None] * (crop(lookup[pair.background_a_id]) - crop(lookup[pair.background_b_id]))
    dev = np.abs(pair.image_a.astype(np.float64) - pair.image_b.astype(np.float64) - expected).max()
    if dev > 1.0:
        return False, f"pair difference deviates by {dev:.3f} from (1-alpha)(Ba-Bb)", {}
    return True, f"alpha=0.5 -> 150; alpha=1 identical; max difference deviation {dev:.3f}", {"max_dev": dev}


def run_selftest(corrupt: str | None = None) -> list[CheckResult]:
    return [
        _timed("1 sinkhorn-lp equivalence", sinkhorn_lp, budget=5.0),
        _timed("2 gradient suite", gradient_suite, budget=30.0, corrupt=corrupt),
        _timed("3 depth-weight contract", depth_contract),
        _timed("4 GRL contract", grl_contract),
        _timed("5 metric identities", metric_identities),
        _timed("6 metric oracles", metric_oracles),
        _timed("7 compositor algebra", compositor_algebra),
    ]
