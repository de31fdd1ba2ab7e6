"""Divergence, attack-impact, minimal-sample-size and mixture tables on synthetic data.

    python3 scripts/run_tables.py --seed 0 --windows 600
"""

import argparse
import time

from canforest import canonical
from canforest.experiments import (TABLE2_EPS, attack_table, craft_all, divergence_table, mixture_table,
                                   mixture_trend, sample_size_table, synthetic_splits, train_substitutes)
from canforest.forest import train_federated


def show(title, rows):
    print(f"\n{title}")
    keys = list(rows[0])
    print("  ".join(f"{k:>14}" for k in keys))
    for r in rows:
        print("  ".join(f"{v:>14.4f}" if isinstance(v, float) else f"{str(v):>14}" for v in r.values()))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--windows", type=int, default=600, help="windows per traffic class")
    ap.add_argument("--miners", type=int, default=5)
    args = ap.parse_args()

    start = time.perf_counter()
    sp = synthetic_splits(200 * args.windows, seed=args.seed)
    model, _ = train_federated(sp.train, args.miners, seed=canonical.derive_seed(args.seed, "train"))
    subs = train_substitutes(sp.surrogate, args.seed)
    fgsm = {f"fgsm{e}": b for e, b in zip(TABLE2_EPS, craft_all([f"fgsm{e}" for e in TABLE2_EPS], subs, sp.test).values())}
    others = craft_all(["jsma", "svm", "dt"], subs, sp.test)

    show("divergence from the training rows", divergence_table(sp.train, sp.test, fgsm, seed=args.seed))
    show("classifier under attack", attack_table(model, sp.test, {**fgsm, **others}))
    picked = {k: fgsm[k] for k in ("fgsm0.36", "fgsm0.4", "fgsm0.5")} | {"svm": others["svm"]}
    show("smallest detected batch (class-conditional)", sample_size_table(sp.train, picked, seed=args.seed))
    mix = mixture_table(sp.train, {"fgsm0.5": fgsm["fgsm0.5"], "svm": others["svm"]}, seed=args.seed)
    show("H0 acceptance against benign share", mix)
    print("\nspearman:", {k: round(v, 3) for k, v in mixture_trend(mix).items()})
    print(f"\n{time.perf_counter() - start:.1f}s")


if __name__ == "__main__":
    main()
