"""Accuracy of the federated forest as the number of miners grows.

The default setting is data-scarce (short windows, few training rows per class)
so that splitting the data among more miners leaves each one less to learn from.

    python3 scripts/run_miner_trend.py --train-fraction 0.05
"""

import argparse

from canforest import canonical
from canforest.experiments import Splits, miner_trend, stratified_split, synthetic_logs
from canforest.features import FeatureParams, build_dataset, normalize


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--window", type=int, default=32)
    ap.add_argument("--windows", type=int, default=400, help="windows per traffic class")
    ap.add_argument("--train-fraction", type=float, default=0.05)
    ap.add_argument("--miners", type=int, nargs="+", default=[5, 10, 15, 20])
    args = ap.parse_args()

    params = FeatureParams(window_frames=args.window, stride=args.window)
    ds = build_dataset(synthetic_logs(args.window * args.windows, seed=args.data_seed), params)
    f = args.train_fraction
    train, test = stratified_split(ds, (f, 1 - f), canonical.derive_seed(args.data_seed, "split"))
    train = normalize(train)
    splits = Splits(train, train, normalize(test, train.norm), train.norm)
    print(f"{len(train)} training rows, {len(test)} test rows")
    for r in miner_trend(splits, ks=args.miners):
        print(f"k={r['miners']:>3}  accuracy {r['mean_accuracy']:.4f} +/- {r['std_accuracy']:.4f}")


if __name__ == "__main__":
    main()
