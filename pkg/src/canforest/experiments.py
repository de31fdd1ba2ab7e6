"""End-to-end experiment flows shared by the CLI, scripts/ and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import spearmanr

from canforest import canonical
from canforest.attacks import AdversarialBatch, DtAttack, Fgsm, Jsma, Method, SvmAttack, craft_batch, parse_method, transferability_rate
from canforest.augment import Sandbox, build_augmented, capture, detection_rate, recovered_rate, retrain_augmented
from canforest.detector import MMD, KernelSpec, energy_distance, min_sample_size, mixture_test, mmd_biased, two_sample_test
from canforest.errors import CaptureRefused
from canforest.features import FeatureParams, LabeledDataset, NormState, build_dataset, normalize
from canforest.forest import FederatedForest, ForestParams, train_federated
from canforest.ingest import TrafficProfile, default_profile, generate_synthetic
from canforest.registry import Registry
from canforest.report import MetricsReport, batch_as_dataset, evaluate
from canforest.substitutes import MlpParams, SvmParams, train_dt, train_mlp, train_svm
from canforest.types import BENIGN_CLASSES, CanLog

TABLE2_EPS = (0.01, 0.08, 0.15, 0.22, 0.29, 0.36, 0.40, 0.50)


# --------------------------------------------------------------------------
# data


def synthetic_logs(
    frames_per_class: int, seed: int = 0, profiles: Sequence[TrafficProfile] | None = None
) -> list[CanLog]:
    profiles = profiles or [default_profile(c) for c in BENIGN_CLASSES]
    return [
        generate_synthetic(p, frames_per_class, canonical.derive_seed(seed, "synth", p.traffic_class.value))
        for p in profiles
    ]


def stratified_split(ds: LabeledDataset, fractions: Sequence[float], seed: int = 0) -> list[LabeledDataset]:
    """Per-class shuffled split; the last part takes the remainder."""
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[] for _ in fractions]
    for c in range(len(ds.class_names)):
        idx = rng.permutation(np.flatnonzero(ds.y == c))
        cuts = np.floor(np.cumsum(fractions)[:-1] * idx.size).astype(int)
        for i, chunk in enumerate(np.split(idx, cuts)):
            parts[i].append(chunk)
    return [ds.subset(np.sort(np.concatenate(p))) for p in parts]


@dataclass(frozen=True)
class Splits:
    """Defender training set, adversary surrogate set, held-out test set (all normalized)."""

    train: LabeledDataset
    surrogate: LabeledDataset
    test: LabeledDataset
    norm: NormState


def make_splits(ds: LabeledDataset, surrogate_fraction: float = 0.3, test_fraction: float = 0.2, seed: int = 0) -> Splits:
    train_fraction = 1.0 - surrogate_fraction - test_fraction
    train, surrogate, test = stratified_split(ds, (train_fraction, surrogate_fraction, test_fraction), seed)
    train = normalize(train)
    return Splits(train, normalize(surrogate, train.norm), normalize(test, train.norm), train.norm)


def synthetic_splits(
    frames_per_class: int, seed: int = 0, feature_params: FeatureParams = FeatureParams(), **kw
) -> Splits:
    ds = build_dataset(synthetic_logs(frames_per_class, seed), feature_params)
    return make_splits(ds, seed=canonical.derive_seed(seed, "split"), **kw)


# --------------------------------------------------------------------------
# adversary


@dataclass(frozen=True)
class Substitutes:
    mlp: object
    svm: object
    dt: object

    def for_method(self, method: Method):
        if isinstance(method, (Fgsm, Jsma)):
            return self.mlp
        if isinstance(method, SvmAttack):
            return self.svm
        if isinstance(method, DtAttack):
            return self.dt
        raise TypeError(method)


def train_substitutes(
    surrogate: LabeledDataset,
    seed: int = 0,
    mlp_params: MlpParams = MlpParams(),
    svm_params: SvmParams = SvmParams(),
    dt_params: ForestParams = ForestParams(feature_subsample=9),
) -> Substitutes:
    return Substitutes(
        train_mlp(surrogate, mlp_params, canonical.derive_seed(seed, "mlp")),
        train_svm(surrogate, svm_params, canonical.derive_seed(seed, "svm")),
        train_dt(surrogate, dt_params, canonical.derive_seed(seed, "dt")),
    )


def craft(method: Method | str, subs: Substitutes, data: LabeledDataset) -> AdversarialBatch:
    method = parse_method(method) if isinstance(method, str) else method
    return craft_batch(method, subs.for_method(method), data)


def craft_all(methods: Iterable[Method | str], subs: Substitutes, data: LabeledDataset) -> dict[str, AdversarialBatch]:
    out = {}
    for m in methods:
        b = craft(m, subs, data)
        out[b.method] = b
    return out


# --------------------------------------------------------------------------
# tables


def _cap(X: np.ndarray, max_rows: int | None, rng) -> np.ndarray:
    if max_rows is None or len(X) <= max_rows:
        return X
    return X[np.sort(rng.choice(len(X), max_rows, replace=False))]


def divergence_table(
    reference: LabeledDataset,
    benign: LabeledDataset,
    batches: dict[str, AdversarialBatch],
    kernel: KernelSpec = KernelSpec(),
    max_rows: int | None = 1000,
    seed: int = 0,
) -> list[dict]:
    """MMD and energy distance of benign and each perturbed set against the reference."""
    rng = np.random.default_rng(seed)
    ref = _cap(reference.X, max_rows, rng)
    rows = []
    for name, X in [("benign", benign.X)] + [(k, b.perturbed) for k, b in batches.items()]:
        Xc = _cap(X, max_rows, rng)
        rows.append({"manipulation": name, "mmd": mmd_biased(ref, Xc, kernel), "ed": energy_distance(ref, Xc)})
    return rows


def attack_table(model, test: LabeledDataset, batches: dict[str, AdversarialBatch]) -> list[dict]:
    """Benign vs perturbed metrics of the target, with transferability rates."""
    base = evaluate(model, test)
    rows = [{"manipulation": "benign", "accuracy": base.accuracy, "precision": base.precision,
             "recall": base.recall, "f1": base.f1, "transferability": 0.0, "substitute_success": 0.0}]
    for name, b in batches.items():
        r = evaluate(model, batch_as_dataset(b, model.class_names))
        rows.append({"manipulation": name, "accuracy": r.accuracy, "precision": r.precision, "recall": r.recall,
                     "f1": r.f1, "transferability": transferability_rate(model, b),
                     "substitute_success": float(np.mean(b.success))})
    return rows


def sample_size_table(
    reference: LabeledDataset,
    batches: dict[str, AdversarialBatch],
    sizes: Sequence[int] = (50, 100, 500, 1000),
    trials: int = 20,
    seed: int = 0,
    mode: str = "class",
    statistic_kind: str = MMD,
    n_permutations: int = 200,
    alpha: float = 0.05,
    threshold: float = 0.9,
) -> list[dict]:
    """Minimal detected subsample size per (method, class).

    mode="class" compares each class's adversarial rows with that class's benign
    reference rows; mode="pooled" uses all classes at once (class "all").
    """
    rows = []
    for name, b in batches.items():
        labels = np.array(b.labels)
        groups = [("all", np.arange(len(b)), reference.X)] if mode == "pooled" else [
            (c, np.flatnonzero(labels == c), reference.of_class(c).X) for c in reference.class_names if np.any(labels == c)
        ]
        for cls, idx, ref in groups:
            res = min_sample_size(ref, b.perturbed[idx], sizes, trials, canonical.derive_seed(seed, name, cls),
                                  statistic_kind, n_permutations, alpha, threshold)
            row = {"manipulation": name, "class": cls, "min_size": res.min_detected if res.min_detected else "-"}
            for r in res.rows:
                row[f"reject@{r.size}"] = r.rejection_fraction
            rows.append(row)
    return rows


def mixture_table(
    benign: LabeledDataset,
    batches: dict[str, AdversarialBatch],
    proportions: Sequence[float] = tuple(i / 10 for i in range(11)),
    size: int = 100,
    trials: int = 20,
    seed: int = 0,
    statistic_kind: str = MMD,
    n_permutations: int = 200,
    alpha: float = 0.05,
) -> list[dict]:
    rows = []
    for name, b in batches.items():
        curve = mixture_test(b.perturbed, benign.X, proportions, size, trials, canonical.derive_seed(seed, name),
                             statistic_kind, n_permutations, alpha)
        rows += [{"manipulation": name, "benign_proportion": p, "h0_acceptance": a} for p, a in curve]
    return rows


def mixture_trend(rows: list[dict]) -> dict[str, float]:
    """Spearman rank correlation of H0 acceptance with benign proportion, per manipulation.

    A constant curve has no defined correlation and maps to 0.0.
    """
    out = {}
    for name in dict.fromkeys(r["manipulation"] for r in rows):
        p = [r["benign_proportion"] for r in rows if r["manipulation"] == name]
        a = [r["h0_acceptance"] for r in rows if r["manipulation"] == name]
        rho = spearmanr(p, a).statistic if len(set(a)) > 1 else 0.0
        out[name] = float(rho)
    return out


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentationResult:
    model: FederatedForest
    sandbox: Sandbox
    rows: list[dict]
    benign_before: MetricsReport
    benign_after: MetricsReport
    refused: list[str] = field(default_factory=list)


def screen_and_capture(
    sandbox: Sandbox,
    reference: LabeledDataset,
    batches: dict[str, AdversarialBatch],
    batch_size: int | None = None,
    statistic_kind: str = MMD,
    n_permutations: int = 500,
    alpha: float = 0.05,
    seed: int = 0,
    clock: float = 0.0,
) -> list[str]:
    """Test each batch (or a `batch_size` sample of it) against the benign
    reference and capture the whole batch when H0 is rejected. Returns the
    refused methods."""
    refused = []
    for i, (name, b) in enumerate(batches.items()):
        rng = np.random.default_rng(canonical.derive_seed(seed, "screen", name))
        size = min(batch_size or len(b), len(b), len(reference))
        ref = reference.X[rng.choice(len(reference), size, replace=False)]
        cand = b.perturbed[rng.choice(len(b), size, replace=False)]
        verdict = two_sample_test(ref, cand, statistic_kind, n_permutations, alpha, int(rng.integers(2**63 - 1)))
        try:
            capture(sandbox, b, verdict, timestamp=clock + i)
        except CaptureRefused:
            refused.append(name)
    return refused


def augmentation_experiment(
    splits: Splits,
    base_model: FederatedForest,
    subs: Substitutes,
    augment_methods: Sequence[str],
    eval_batches: dict[str, AdversarialBatch],
    k: int = 5,
    params: ForestParams = ForestParams(),
    seed: int = 0,
    registry: Registry | None = None,
    screen_kwargs: dict | None = None,
) -> AugmentationResult:
    """Craft from the adversary's surrogate rows, screen, capture, retrain, and
    score old vs augmented model on batches crafted from the test rows."""
    attack = craft_all(augment_methods, subs, splits.surrogate)
    sandbox = Sandbox()
    refused = screen_and_capture(sandbox, splits.train, attack, seed=seed, **(screen_kwargs or {}))
    aug = build_augmented(splits.train, sandbox, [b.method for b in attack.values()])
    model = retrain_augmented(aug, k, params, canonical.derive_seed(seed, "aug"), registry, timestamp=1.0)
    rows = []
    for name, b in eval_batches.items():
        old = detection_rate(base_model, b)
        new = detection_rate(model, b)
        rows.append({"manipulation": name, "old_rate": old, "new_rate": new, "recovered_pct": recovered_rate(old, new)})
    return AugmentationResult(model, sandbox, rows, evaluate(base_model, splits.test), evaluate(model, splits.test), refused)


def miner_trend(
    splits: Splits, ks: Sequence[int] = (5, 10, 15, 20), seeds: Sequence[int] = range(5), params: ForestParams = ForestParams()
) -> list[dict]:
    rows = []
    for k in ks:
        accs = [evaluate(train_federated(splits.train, k, params, s)[0], splits.test).accuracy for s in seeds]
        rows.append({"miners": k, "mean_accuracy": float(np.mean(accs)), "std_accuracy": float(np.std(accs))})
    return rows
