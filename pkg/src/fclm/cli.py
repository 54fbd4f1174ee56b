"""Command-line entry point: ``fclm <subcommand> ...``.

Exit codes: 0 success, 1 a check failed, 2 bad input.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .checks import GRADIENT_CASES, GRAD_TOL, gradient_errors, run_selftest
from .compositor import make_pair
from .fg_align import SinkhornDivergence, sinkhorn_plan
from .metrics_dis import evaluate_dis
from .metrics_matting import evaluate_matte, imq
from .pngio import ImageReadError, list_pngs, load_gray, load_rgb, save_gray, save_rgb
from .pred_loss import head_loss_with_grad
from .toy_harness import TrainConfig, TrainingDiverged, make_blob_dataset, run_training

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INPUT = 0, 1, 2
SELFTEST_BUDGET_S = 60.0

MATTING_HEADERS = {"sad": "SAD", "mse": "MSE", "mad": "MAD", "grad": "Grad", "conn": "Conn"}
IMQ_HEADERS = {"mse": "IMQ_MSE", "mad": "IMQ_MAD", "grad": "IMQ_Grad", "conn": "IMQ_Conn"}
DIS_HEADERS = {
    "max_f": "maxF_beta",
    "weighted_f": "Fw_beta",
    "mae": "M",
    "s_measure": "S_alpha",
    "e_measure": "Em_phi",
    "hce": "HCE_gamma",
}


class InputError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: list
    seed: int | None
    version: str
    wall_time_s: float

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


def default_seed() -> int:
    raw = os.environ.get("FCLM_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"FCLM_SEED must be an integer, got {raw!r}") from None


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _manifest_path(out: str) -> Path:
    p = Path(out)
    return p / "manifest.json" if p.is_dir() else p.with_name(p.name + ".manifest.json")


# ---------------------------------------------------------------- composite

def cmd_composite(args) -> tuple[int, list[str]]:
    fg_dir, alpha_dir, bg_dir = Path(args.fg), Path(args.alpha), Path(args.bg)
    fg_names = list_pngs(fg_dir)
    if not fg_names:
        raise InputError(f"no images in {fg_dir}")
    missing = sorted(set(fg_names) - set(list_pngs(alpha_dir)))
    if missing:
        raise InputError(f"foregrounds without an alpha matte: {', '.join(missing)}")
    bg_names = list_pngs(bg_dir)
    if len(bg_names) < 2:
        raise InputError(f"need at least two backgrounds in {bg_dir}")
    if args.pairs < 1:
        raise InputError("--pairs must be positive")
    pool = [(Path(n).stem, load_rgb(bg_dir / n)) for n in bg_names]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    records = []
    for i in range(args.pairs):
        name = fg_names[i % len(fg_names)]
        fg, alpha = load_rgb(fg_dir / name), load_gray(alpha_dir / name)
        pair_seed = args.seed * 1_000_003 + i
        try:
            pair = make_pair(fg, alpha, pool, pair_seed)
        except ValueError as exc:
            raise InputError(f"{name}: {exc}") from None
        pid = f"{i:05d}"
        save_rgb(out / f"{pid}_a.png", pair.image_a)
        save_rgb(out / f"{pid}_b.png", pair.image_b)
        save_gray(out / f"{pid}_alpha.png", pair.alpha, bits=16)
        records.append({
            "pair_id": pid,
            "foreground": name,
            "background_a": pair.background_a_id,
            "background_b": pair.background_b_id,
            "seed": pair_seed,
        })
    (out / "pairs.json").write_text(_dump({"seed": args.seed, "pairs": records}))
    return EXIT_OK, [str(fg_dir), str(alpha_dir), str(bg_dir)]


# ---------------------------------------------------------------- eval

def _matched_names(pred_dir: Path, gt_dir: Path, instances: bool) -> list[str]:
    def listing(d):
        if not d.is_dir():
            raise InputError(f"not a directory: {d}")
        if instances:
            return sorted(p.name for p in d.iterdir() if p.is_dir())
        return list_pngs(d)

    pred, gt = set(listing(pred_dir)), set(listing(gt_dir))
    if pred != gt:
        diff = sorted(pred ^ gt)
        raise InputError(f"prediction and ground-truth sets differ: {', '.join(diff)}")
    if not pred:
        raise InputError("no images")
    return sorted(pred)


def _load_instances(d: Path) -> list[np.ndarray]:
    return [load_gray(d / n) for n in list_pngs(d)]


def _matting_row(pred_dir: Path, gt_dir: Path, name: str, instances: bool) -> dict:
    if instances:
        pi, gi = _load_instances(pred_dir / name), _load_instances(gt_dir / name)
        if not gi:
            raise InputError(f"{name}: no ground-truth instances")
        shape = gi[0].shape
        flat_p = np.clip(sum(pi), 0, 1) if pi else np.zeros(shape)
        report = _matte_report(flat_p, np.clip(sum(gi), 0, 1), name)
        row = {k: report[k] for k in MATTING_HEADERS}
        for q in IMQ_HEADERS:
            row[f"imq_{q}"] = imq(pi, gi, q)
        return row
    report = _matte_report(load_gray(pred_dir / name), load_gray(gt_dir / name), name)
    return {k: report[k] for k in MATTING_HEADERS}


def _matte_report(pred, gt, name) -> dict:
    try:
        return evaluate_matte(pred, gt).as_dict()
    except ValueError as exc:
        raise InputError(f"{name}: {exc}") from None


def _dis_row(pred_dir: Path, gt_dir: Path, name: str, instances: bool) -> dict:
    pred, gt = load_gray(pred_dir / name), load_gray(gt_dir / name)
    try:
        r = evaluate_dis(pred, gt)
    except ValueError as exc:
        raise InputError(f"{name}: {exc}") from None
    return {k: getattr(r, k) for k in DIS_HEADERS}


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_eval(out: Path, names, rows, headers: dict, extra: dict | None = None) -> None:
    cols = sorted(rows[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["filename"] + cols)
    for name, row in zip(names, rows):
        w.writerow([name] + [_cell(row[c]) for c in cols])
    (out / "per_image.csv").write_text(buf.getvalue())

    agg = {"count": len(rows)}
    labels = {**headers, **(extra or {})}
    for key in [k for k in labels if k in cols] + [k for k in cols if k not in labels]:
        vals = [row[key] for row in rows if row[key] is not None]
        agg[labels.get(key, key)] = float(np.mean(vals)) if vals else None
    (out / "aggregate.json").write_text(_dump(agg))


def _run_eval(args, row_fn, headers, extra=None):
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    instances = getattr(args, "instances", False)
    names = _matched_names(pred_dir, gt_dir, instances)
    if args.workers < 1:
        raise InputError("--workers must be at least 1")
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        rows = list(pool.map(lambda n: row_fn(pred_dir, gt_dir, n, instances), names))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_eval(out, names, rows, headers, extra)
    return EXIT_OK, [str(pred_dir), str(gt_dir)]


def cmd_eval_matting(args):
    extra = {f"imq_{q}": v for q, v in IMQ_HEADERS.items()}
    return _run_eval(args, _matting_row, MATTING_HEADERS, extra)


def cmd_eval_dis(args):
    return _run_eval(args, _dis_row, DIS_HEADERS)


# ---------------------------------------------------------------- loss / sinkhorn

def cmd_loss(args):
    pred, gt = load_gray(args.pred), load_gray(args.gt)
    try:
        total, _, parts = head_loss_with_grad(pred, gt, args.task)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    _emit(_dump({"task": args.task, **parts, "total": total}), args.out)
    return EXIT_OK, [args.pred, args.gt]


def _read_cost(path) -> np.ndarray:
    try:
        rows = [r for r in csv.reader(Path(path).read_text().splitlines()) if r and any(c.strip() for c in r)]
        cost = np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None
    except ValueError as exc:
        raise InputError(f"{path}: malformed cost matrix ({exc})") from None
    if cost.ndim != 2 or cost.size == 0:
        raise InputError(f"{path}: cost matrix must be a non-empty rectangle")
    return cost


def cmd_sinkhorn(args):
    cost = _read_cost(args.cost)
    try:
        plan = sinkhorn_plan(cost, reg=args.reg, max_iters=args.max_iters, marginal_tol=args.tol)
    except SinkhornDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED, [args.cost]
    except ValueError as exc:
        raise InputError(str(exc)) from None
    report = {
        "loss": float(np.sum(plan.pi * plan.cost)),
        "plan": plan.pi.tolist(),
        "iterations": plan.iterations_used,
        "row_residual": plan.row_residual,
        "col_residual": plan.col_residual,
        "reg": plan.reg,
    }
    _emit(_dump(report), args.out)
    return EXIT_OK, [args.cost]


# ---------------------------------------------------------------- checks

def cmd_gradcheck(args):
    if args.corrupt and args.corrupt not in GRADIENT_CASES:
        raise InputError(f"unknown loss {args.corrupt!r}; choose from {', '.join(GRADIENT_CASES)}")
    errs = gradient_errors(args.instances, args.seed, args.corrupt)
    failing = [k for k, v in errs.items() if not v <= GRAD_TOL]
    _emit(_dump({"tolerance": GRAD_TOL, "max_relative_error": errs, "failing": failing}), args.out)
    return (EXIT_CHECK_FAILED if failing else EXIT_OK), []


def cmd_selftest(args):
    if args.corrupt_gradient and args.corrupt_gradient not in GRADIENT_CASES:
        raise InputError(f"unknown loss {args.corrupt_gradient!r}")
    t0 = time.perf_counter()
    results = run_selftest(corrupt=args.corrupt_gradient)
    for r in results:
        print(r.line())
    elapsed = time.perf_counter() - t0
    if elapsed > SELFTEST_BUDGET_S:
        print(f"warning: selftest took {elapsed:.1f}s (budget {SELFTEST_BUDGET_S:.0f}s)", file=sys.stderr)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    if args.out:
        Path(args.out).write_text(_dump({r.name: {"passed": r.passed, "detail": r.detail} for r in results}))
    return (EXIT_CHECK_FAILED if failed else EXIT_OK), []


# ---------------------------------------------------------------- train

def cmd_train_toy(args):
    kw = {f.name: getattr(args, f.name) for f in fields(TrainConfig)}
    cfg = TrainConfig(**kw)
    dataset = make_blob_dataset(args.pairs, args.size, cfg.seed)
    try:
        log, _ = run_training(dataset, cfg)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED, []
    except ValueError as exc:
        raise InputError(str(exc)) from None
    Path(args.out).write_text(log.to_jsonl())
    if log.final is not None:
        print(json.dumps({"final": log.final}))
    return EXIT_OK, []


# ---------------------------------------------------------------- parser

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(TrainConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        kind = {"int": int, "float": float, "str": str}[f.type if isinstance(f.type, str) else f.type.__name__]
        extra = {"choices": ["matting", "dis"]} if f.name == "task" else {}
        p.add_argument(flag, dest=f.name, type=kind, default=f.default, **extra)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fclm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fclm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("composite", help="composite foregrounds over pairs of backgrounds")
    p.add_argument("--fg", required=True)
    p.add_argument("--alpha", required=True)
    p.add_argument("--bg", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_composite)

    for name, fn, helptext in (
        ("eval-matting", cmd_eval_matting, "SAD/MSE/MAD/Grad/Conn (and IMQ) over a directory"),
        ("eval-dis", cmd_eval_dis, "maxF/weighted F/MAE/S/E/HCE over a directory"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--pred", required=True)
        p.add_argument("--gt", required=True)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=1)
        if name == "eval-matting":
            p.add_argument("--instances", action="store_true",
                           help="each entry is a directory of per-instance mattes")
        p.set_defaults(func=fn)

    p = sub.add_parser("loss", help="prediction-head losses for one image pair")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--task", choices=["matting", "dis"], required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("sinkhorn", help="entropic OT plan for a CSV cost matrix")
    p.add_argument("cost")
    p.add_argument("--reg", type=float, default=0.05)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sinkhorn)

    p = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--corrupt", choices=sorted(GRADIENT_CASES), help="debug: perturb one gradient")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="train the toy model on synthetic blob pairs")
    p.add_argument("--out", required=True, help="JSON-lines log path")
    p.add_argument("--seed", type=int)
    p.add_argument("--pairs", type=int, default=8)
    p.add_argument("--size", type=int, default=16)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("selftest", help="run the embedded oracle suite")
    p.add_argument("--corrupt-gradient", choices=sorted(GRADIENT_CASES), help="debug: perturb one gradient")
    p.add_argument("--out")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    t0 = time.perf_counter()
    try:
        if hasattr(args, "seed") and args.seed is None:
            args.seed = default_seed()
        code, inputs = args.func(args)
    except (InputError, ImageReadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    out = getattr(args, "out", None)
    if out and code != EXIT_INPUT:
        config = {k: v for k, v in vars(args).items() if k not in ("func", "command")}
        RunManifest(args.command, config, inputs, getattr(args, "seed", None), __version__,
                    round(time.perf_counter() - t0, 3)).write(_manifest_path(out))
    return code


if __name__ == "__main__":
    sys.exit(main())
