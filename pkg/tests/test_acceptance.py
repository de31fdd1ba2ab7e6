"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line (repeated in the terminal summary) and then
asserts, so a failing criterion also fails the run.
"""

import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from canforest import canonical
from canforest.cli import main
from canforest.detector import ED, MMD, energy_distance, mmd_biased, two_sample_test
from canforest.errors import TamperError
from canforest.experiments import (Splits, TABLE2_EPS, augmentation_experiment, craft, craft_all, make_splits,
                                   miner_trend, mixture_table, sample_size_table, stratified_split, synthetic_logs,
                                   synthetic_splits, train_substitutes)
from canforest.features import FeatureParams, build_dataset, fft_magnitude, normalize, permutation_entropy, sample_entropy
from canforest.forest import ForestParams, train_federated
from canforest.registry import HashChain, Registry, train_registered
from canforest.report import batch_as_dataset, evaluate
from canforest.substitutes import mlp_gradient, mlp_jacobian

from conftest import record_criterion
from test_detector import ed_oracle, mmd_oracle
from test_features import permen_oracle, random_series, sampen_oracle
from test_substitutes import random_mlp, rel_err, smooth_inputs

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
WINDOWS_PER_CLASS = 400


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


# -- 1 ---------------------------------------------------------------------------


def test_01_statistic_oracles():
    rng = np.random.default_rng(2024)
    worst = 0.0
    with Timer() as t:
        for _ in range(1000):
            d = int(rng.integers(1, 10))
            X = rng.normal(size=(int(rng.integers(2, 11)), d))
            Y = rng.normal(rng.uniform(-1, 1), rng.uniform(0.5, 2), size=(int(rng.integers(2, 11)), d))
            worst = max(worst, abs(mmd_biased(X, Y) - mmd_oracle(X, Y)), abs(energy_distance(X, Y) - ed_oracle(X, Y)))
    ok = worst < 1e-9 and t.elapsed < 10
    record_criterion(1, ok, f"max |statistic - pair-sum oracle| = {worst:.2e} over 1000 cases, {t.elapsed:.1f}s")
    assert ok


# -- 2 ---------------------------------------------------------------------------


def test_02_null_calibration():
    rng = np.random.default_rng(7)
    rates = {}
    with Timer() as t:
        for kind in (MMD, ED):
            rejected = 0
            for trial in range(200):
                X, Y = rng.normal(size=(50, 9)), rng.normal(size=(50, 9))
                rejected += two_sample_test(X, Y, kind, 1000, 0.05, seed=trial).reject_h0
            rates[kind] = rejected / 200
    ok = all(0.02 <= r <= 0.08 for r in rates.values()) and t.elapsed < 120
    record_criterion(2, ok, f"null rejection rate MMD {rates[MMD]:.3f}, ED {rates[ED]:.3f}, {t.elapsed:.1f}s")
    assert ok


# -- 3 ---------------------------------------------------------------------------


def test_03_gradient_correctness():
    m = random_mlp(5)
    rng = np.random.default_rng(5)
    h = 1e-5
    worst = 0.0
    with Timer() as t:
        for x in smooth_inputs(m, rng, 100):
            k = int(rng.integers(4))
            loss = lambda z: -np.log(m.predict_proba(z)[0, k])  # noqa: E731
            fd = np.array([(loss(x + h * e) - loss(x - h * e)) / (2 * h) for e in np.eye(9)])
            worst = max(worst, rel_err(mlp_gradient(m, x, k), fd))
            fdj = np.stack([(m.predict_proba(x + h * e)[0] - m.predict_proba(x - h * e)[0]) / (2 * h) for e in np.eye(9)], 1)
            J = mlp_jacobian(m, x)
            worst = max(worst, max(rel_err(J[j], fdj[j]) for j in range(4)))
    ok = worst < 1e-4 and t.elapsed < 10
    record_criterion(3, ok, f"max relative error vs central differences {worst:.2e}, {t.elapsed:.1f}s")
    assert ok


# -- 4 ---------------------------------------------------------------------------


def test_04_table2_trend():
    with Timer() as t:
        ds = build_dataset(synthetic_logs(200 * 500, seed=0))
        sp = make_splits(ds, seed=canonical.derive_seed(0, "split"))
        subs = train_substitutes(sp.surrogate, 0)
        benign = normalize(ds, sp.norm)
        values = [mmd_biased(benign.X, craft(f"fgsm{eps}", subs, benign).perturbed) for eps in TABLE2_EPS]
    ok = len(benign) >= 2000 and bool(np.all(np.diff(values) > 0)) and t.elapsed < 60
    trend = " ".join(f"{v:.4f}" for v in values)
    record_criterion(4, ok, f"MMD over eps on {len(benign)} rows: {trend}, {t.elapsed:.1f}s")
    assert ok


# -- 5, 7, 8 share one experiment per seed ---------------------------------------------


@pytest.fixture(scope="module")
def attack_runs():
    runs = []
    with Timer() as t:
        for seed in SEEDS:
            sp = synthetic_splits(200 * WINDOWS_PER_CLASS, seed=seed)
            base, _ = train_federated(sp.train, 5, seed=canonical.derive_seed(seed, "train"))
            subs = train_substitutes(sp.surrogate, seed)
            batches = craft_all(["fgsm0.29", "fgsm0.36", "fgsm0.5", "jsma", "svm"], subs, sp.test)
            benign_acc = evaluate(base, sp.test).accuracy
            drops = {k: benign_acc - evaluate(base, batch_as_dataset(b, base.class_names)).accuracy
                     for k, b in batches.items()}
            scored = {k: batches[k] for k in ("fgsm0.29", "fgsm0.36", "fgsm0.5", "svm")}
            two = augmentation_experiment(sp, base, subs, ["fgsm0.36", "svm"], scored, seed=seed)
            four = augmentation_experiment(sp, base, subs, ["fgsm0.36", "svm", "jsma", "dt"], scored, seed=seed)
            runs.append({"seed": seed, "drops": drops, "two": two, "four": four})
    return runs, t.elapsed


def test_05_attack_degradation(attack_runs):
    runs, elapsed = attack_runs
    mean = {k: float(np.mean([r["drops"][k] for r in runs])) for k in ("fgsm0.36", "svm", "jsma")}
    ok = mean["fgsm0.36"] >= 0.40 and mean["svm"] >= 0.40 and mean["jsma"] < 0.10 and elapsed < 180
    record_criterion(5, ok, f"mean accuracy drop over seeds {SEEDS}: FGSM(0.36) {mean['fgsm0.36']:.3f}, "
                            f"SVM {mean['svm']:.3f}, JSMA {mean['jsma']:.3f}, {elapsed:.1f}s")
    assert ok


def test_07_augmentation_recovery(attack_runs):
    runs, elapsed = attack_runs
    ok = elapsed < 180
    parts = []
    for r in runs:
        res = r["two"]
        rate = min(row["new_rate"] for row in res.rows)
        gain = min(row["recovered_pct"] for row in res.rows)
        f1_gap = abs(res.benign_after.f1 - res.benign_before.f1)
        ok &= rate >= 0.90 and gain >= 60 and f1_gap <= 0.05 and not res.refused
        parts.append(f"seed {r['seed']}: min rate {rate:.3f}, min gain {gain:.1f} pts, F1 gap {f1_gap:.4f}")
    record_criterion(7, ok, "; ".join(parts) + f", {elapsed:.1f}s")
    assert ok


def test_08_augmentation_choice(attack_runs):
    runs, _ = attack_runs
    pairs = [(r["two"].benign_after.f1, r["four"].benign_after.f1) for r in runs]
    captured_all = all(not r["four"].refused for r in runs)
    ok = captured_all and all(four < two for two, four in pairs)
    detail = ", ".join(f"{two:.4f} > {four:.4f}" for two, four in pairs)
    record_criterion(8, ok, f"benign macro-F1 with {{FGSM, SVM}} vs {{FGSM, SVM, JSMA, DT}} per seed: {detail}")
    assert ok


# -- 6, 9 ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def detector_data():
    sp = synthetic_splits(200 * 600, seed=0)
    subs = train_substitutes(sp.surrogate, 0)
    return sp, craft_all(["fgsm0.36", "fgsm0.4", "fgsm0.5", "svm"], subs, sp.test)


def test_06_table3_minimal_sizes(detector_data):
    sp, batches = detector_data
    with Timer() as t:
        rows = sample_size_table(sp.train, batches, sizes=(50, 100, 500, 1000), trials=20, seed=0, mode="class",
                                 threshold=0.9)
    sizes = [r["min_size"] for r in rows]
    ok = all(s != "-" and s <= 100 for s in sizes) and t.elapsed < 180
    record_criterion(6, ok, f"minimal detected size per (method, class): max {max(s for s in sizes if s != '-')} "
                            f"over {len(rows)} cells, undetected {sizes.count('-')}, {t.elapsed:.1f}s")
    assert ok


def test_09_mixture_robustness(detector_data):
    sp, batches = detector_data
    with Timer() as t:
        rows = mixture_table(sp.train, {"fgsm0.5": batches["fgsm0.5"]}, size=100, trials=20, seed=0)
    p = [r["benign_proportion"] for r in rows]
    acc = [r["h0_acceptance"] for r in rows]
    rho = float(spearmanr(p, acc).statistic)
    ok = rho >= 0.8 and t.elapsed < 180
    record_criterion(9, ok, f"Spearman rho {rho:.3f}, acceptance {' '.join(f'{a:.2f}' for a in acc)}, {t.elapsed:.1f}s")
    assert ok


# -- 10 --------------------------------------------------------------------------


def test_10_miner_count_trend():
    # Data-scarce setting: short windows and 20 training rows per class, so that
    # splitting among more miners actually thins each shard.
    with Timer() as t:
        params = FeatureParams(window_frames=32, stride=32)
        ds = build_dataset(synthetic_logs(32 * 400, seed=0), params)
        train, test = stratified_split(ds, (0.05, 0.95), canonical.derive_seed(0, "split"))
        train = normalize(train)
        splits = Splits(train, train, normalize(test, train.norm), train.norm)
        rows = miner_trend(splits, ks=(5, 10, 15, 20), seeds=range(5))
    means = [r["mean_accuracy"] for r in rows]
    ok = all(a >= b for a, b in zip(means, means[1:])) and t.elapsed < 180
    record_criterion(10, ok, "mean accuracy k=5/10/15/20: " + " ".join(f"{m:.4f}" for m in means) + f", {t.elapsed:.1f}s")
    assert ok


# -- 11 --------------------------------------------------------------------------


def test_11_integrity(tmp_path):
    rng = np.random.default_rng(11)
    with Timer() as t:
        ds = synthetic_splits(200 * 100, seed=1).train
        params = ForestParams(n_trees=4)
        reg = Registry(tmp_path)
        model, digests = train_registered(ds, 5, params, 3, reg, timestamp=0.0)
        in_memory, _ = train_federated(ds, 5, params, 3)
        same = np.array_equal(Registry(tmp_path).aggregate(digests).predict_proba(ds.X), in_memory.predict_proba(ds.X))
        chain_path = tmp_path / "chain.jsonl"
        detected = 0
        for trial in range(100):
            target = chain_path if trial % 2 else tmp_path / "store" / digests[trial // 2 % len(digests)].hex()
            clean = target.read_bytes()
            data = bytearray(clean)
            data[int(rng.integers(len(data)))] ^= int(rng.integers(1, 256))
            target.write_bytes(bytes(data))
            if target == chain_path:
                detected += not HashChain(chain_path).verify()
            else:
                try:
                    Registry(tmp_path).aggregate(digests)
                except TamperError:
                    detected += 1
            target.write_bytes(clean)
    ok = detected == 100 and same and t.elapsed < 30
    record_criterion(11, ok, f"{detected}/100 single-byte tampers detected, registry round trip identical: {same}, "
                             f"{t.elapsed:.1f}s")
    assert ok


# -- 12 --------------------------------------------------------------------------


def test_12_determinism(tmp_path):
    from pathlib import Path

    config = Path(__file__).resolve().parents[1] / "configs" / "small.yaml"
    codes, times = [], []
    for name in ("a", "b"):
        with Timer() as t:
            codes.append(main(["-c", str(config), "-o", str(tmp_path / name), "pipeline"]))
        times.append(t.elapsed)
    a, b = (tmp_path / "a/manifest.json").read_bytes(), (tmp_path / "b/manifest.json").read_bytes()
    ok = codes == [0, 0] and a == b and max(times) < 300
    record_criterion(12, ok, f"manifests identical: {a == b}, pipeline {max(times):.1f}s per run")
    assert ok


# -- 13 --------------------------------------------------------------------------


def test_13_feature_oracles():
    rng = np.random.default_rng(13)
    mismatches = 0
    for x in random_series(rng, 200):
        mismatches += sample_entropy(x, 2, 0.2) != sampen_oracle(x, 2, 0.2)
        mismatches += permutation_entropy(x, 3, 1) != permen_oracle(x, 3, 1)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=int(rng.integers(2, 500)))
        mag = fft_magnitude(x)
        n = 2 * (mag.size - 1)
        energy = mag[0] ** 2 + 2 * np.sum(mag[1:-1] ** 2) + mag[-1] ** 2
        worst = max(worst, abs(energy - n * np.sum(x * x)) / (n * np.sum(x * x)))
    ok = mismatches == 0 and worst < 1e-9
    record_criterion(13, ok, f"entropy mismatches {mismatches}/400, worst Parseval relative error {worst:.1e}")
    assert ok
