"""Train the toy model with and without each alignment term and print a table.

    python3 scripts/ablate_toy.py --seeds 0 1 2
"""
import argparse
import time

from fclm.toy_harness import TrainConfig, make_blob_dataset, run_training

VARIANTS = {
    "full": {},
    "no-grl": {"lam": 0.0},
    "no-adv": {"w_adv": 0.0},
    "no-ot": {"w_ot": 0.0},
    "no-align": {"w_adv": 0.0, "w_ot": 0.0},
    "no-kd": {"w_kd": 0.0},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--pairs", type=int, default=8)
    ap.add_argument("--size", type=int, default=16)
    args = ap.parse_args()

    print(f"{'variant':<10} {'seed':>4} {'loss ratio':>10} {'disc acc':>9} {'align':>7} {'sec':>5}")
    for seed in args.seeds:
        ds = make_blob_dataset(args.pairs, args.size, seed)
        for name, overrides in VARIANTS.items():
            t0 = time.perf_counter()
            log, _ = run_training(ds, TrainConfig(steps=args.steps, seed=seed, **overrides))
            ratio = log.records[-1]["total"] / log.records[0]["total"]
            print(f"{name:<10} {seed:>4} {ratio:>10.3f} {log.final['disc_acc']:>9.3f} "
                  f"{log.final['align_stat']:>7.3f} {time.perf_counter() - t0:>5.1f}")


if __name__ == "__main__":
    main()
