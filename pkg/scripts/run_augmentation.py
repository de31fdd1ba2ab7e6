"""Sandbox augmentation: detection before and after retraining, and the
benign-F1 cost of adding JSMA and DT batches to the Adversarial class.

    python3 scripts/run_augmentation.py --seeds 0 1 2
"""

import argparse

from canforest import canonical
from canforest.experiments import augmentation_experiment, craft_all, synthetic_splits, train_substitutes
from canforest.forest import train_federated

EVAL = ["fgsm0.29", "fgsm0.36", "fgsm0.5", "svm"]
CHOICES = {"fgsm+svm": ["fgsm0.36", "svm"], "all four": ["fgsm0.36", "svm", "jsma", "dt"]}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--windows", type=int, default=400, help="windows per traffic class")
    args = ap.parse_args()

    for seed in args.seeds:
        sp = synthetic_splits(200 * args.windows, seed=seed)
        base, _ = train_federated(sp.train, 5, seed=canonical.derive_seed(seed, "train"))
        subs = train_substitutes(sp.surrogate, seed)
        batches = craft_all(EVAL, subs, sp.test)
        print(f"\nseed {seed}")
        for label, methods in CHOICES.items():
            res = augmentation_experiment(sp, base, subs, methods, batches, seed=seed)
            print(f"  augment with {label}: benign F1 {res.benign_before.f1:.4f} -> {res.benign_after.f1:.4f}"
                  + (f", refused {res.refused}" if res.refused else ""))
            for r in res.rows:
                print(f"    {r['manipulation']:>9}  {r['old_rate']:.3f} -> {r['new_rate']:.3f}  "
                      f"({r['recovered_pct']:+.1f} pts)")


if __name__ == "__main__":
    main()
