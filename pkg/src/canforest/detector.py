"""Two-sample detection of adversarial batches: biased Gaussian MMD, energy
distance, permutation p-values, minimum-sample-size and mixture sweeps."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from canforest import canonical
from canforest.errors import InvalidInputError, SampleSizeError

log = logging.getLogger(__name__)

MMD = "MMD"
ED = "ED"


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel; `bandwidth=None` means median heuristic on the pooled sample."""

    bandwidth: float | None = None

    def __post_init__(self):
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise InvalidInputError("bandwidth must be positive")


@dataclass(frozen=True)
class DetectionVerdict:
    statistic_kind: str
    statistic: float
    p_value: float
    alpha: float
    reject_h0: bool
    n: int
    m: int

    def to_dict(self) -> dict:
        return {
            "statistic_kind": self.statistic_kind,
            "statistic": float(self.statistic),
            "p_value": float(self.p_value),
            "alpha": float(self.alpha),
            "reject_h0": bool(self.reject_h0),
            "n": self.n,
            "m": self.m,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionVerdict":
        return cls(d["statistic_kind"], d["statistic"], d["p_value"], d["alpha"], bool(d["reject_h0"]), d["n"], d["m"])


def _check(X1, X2) -> tuple[np.ndarray, np.ndarray]:
    X1 = np.asarray(X1, dtype=float)
    X2 = np.asarray(X2, dtype=float)
    X1 = X1.reshape(len(X1), -1)
    X2 = X2.reshape(len(X2), -1)
    if len(X1) < 2 or len(X2) < 2:
        raise SampleSizeError("both samples need at least 2 rows")
    if X1.shape[1] != X2.shape[1]:
        raise InvalidInputError("samples differ in dimensionality")
    return X1, X2


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    # direct differences: the |a|^2 + |b|^2 - 2ab shortcut leaves rounding
    # residue on the diagonal that a square root blows up to ~1e-8
    return cdist(A, B, "sqeuclidean")


def median_bandwidth(Z: np.ndarray) -> float:
    """Median pairwise Euclidean distance over distinct pairs (1.0 if degenerate)."""
    d = np.sqrt(_sq_dists(Z, Z)[np.triu_indices(len(Z), 1)])
    med = float(np.median(d)) if d.size else 0.0
    return med if med > 0 else 1.0


def _resolve(kernel: KernelSpec, Z: np.ndarray) -> float:
    return kernel.bandwidth if kernel.bandwidth is not None else median_bandwidth(Z)


def _quad_stat(M: np.ndarray, a: np.ndarray, n: int, m: int) -> np.ndarray:
    """mean M[A,A] + mean M[B,B] - 2 mean M[A,B] for group indicator rows `a`.

    `a` is (P, N) with 1 for the first sample; returns one value per row.
    """
    b = 1.0 - a
    aM = a @ M
    bM = b @ M
    s_aa = np.einsum("pi,pi->p", aM, a)
    s_bb = np.einsum("pi,pi->p", bM, b)
    s_ab = np.einsum("pi,pi->p", aM, b)
    return s_aa / (n * n) + s_bb / (m * m) - 2.0 * s_ab / (n * m)


def _pooled_matrix(kind: str, Z: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    if kind == MMD:
        sigma = _resolve(kernel, Z)
        return np.exp(-_sq_dists(Z, Z) / (2.0 * sigma * sigma))
    if kind == ED:
        return cdist(Z, Z)
    raise InvalidInputError(f"unknown statistic {kind!r}")


def _finish(kind: str, raw: np.ndarray) -> np.ndarray:
    if kind == MMD:
        return np.sqrt(np.maximum(raw, 0.0))
    # energy distance: 2E|X-Y| - E|X-X'| - E|Y-Y'| = -(quadratic form of distances)
    return np.maximum(-raw, 0.0)


def _block_stat(M: np.ndarray, n: int) -> float:
    """mean M[A,A] + mean M[B,B] - 2 mean M[A,B] for the first-n / rest split.

    Identical samples give bitwise-equal blocks and hence exactly zero.
    """
    return float(M[:n, :n].mean() + M[n:, n:].mean() - 2.0 * M[:n, n:].mean())


def mmd_biased(X1, X2, kernel: KernelSpec = KernelSpec()) -> float:
    """Root of the biased squared-MMD estimator with a Gaussian kernel."""
    X1, X2 = _check(X1, X2)
    K = _pooled_matrix(MMD, np.vstack([X1, X2]), kernel)
    return float(_finish(MMD, np.array([_block_stat(K, len(X1))]))[0])


def energy_distance(X1, X2) -> float:
    """2 E|X1-X2| - E|X1-X1'| - E|X2-X2'| over all pairs (V-statistic)."""
    X1, X2 = _check(X1, X2)
    D = _pooled_matrix(ED, np.vstack([X1, X2]), KernelSpec())
    return float(_finish(ED, np.array([_block_stat(D, len(X1))]))[0])


def statistic(kind: str, X1, X2, kernel: KernelSpec = KernelSpec()) -> float:
    return mmd_biased(X1, X2, kernel) if kind == MMD else energy_distance(X1, X2)


def two_sample_test(
    reference,
    candidate,
    statistic_kind: str = MMD,
    n_permutations: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
    kernel: KernelSpec = KernelSpec(),
    chunk: int = 256,
) -> DetectionVerdict:
    """Permutation test of H0: reference and candidate share a distribution.

    p = (1 + #{permuted >= observed}) / (1 + n_permutations); the kernel
    bandwidth is fixed from the pooled sample, so it is the same for every
    relabelling.
    """
    if n_permutations < 100:
        raise InvalidInputError("need at least 100 permutations")
    if not 0 < alpha < 1:
        raise InvalidInputError("alpha must be in (0, 1)")
    X1, X2 = _check(reference, candidate)
    n, m = len(X1), len(X2)
    Z = np.vstack([X1, X2])
    M = _pooled_matrix(statistic_kind, Z, kernel)
    base = np.zeros(n + m)
    base[:n] = 1.0
    # Compare on the pre-root scale, oriented so larger means more different;
    # the slack lets exact ties count as ">=" despite rounding.
    sign = 1.0 if statistic_kind == MMD else -1.0
    raw_obs = _block_stat(M, n)
    observed = _finish(statistic_kind, np.array([raw_obs]))[0]
    cutoff = sign * raw_obs - 1e-12 * max(1.0, abs(raw_obs))
    rng = np.random.default_rng(seed)
    exceed = 0
    done = 0
    while done < n_permutations:
        p = min(chunk, n_permutations - done)
        perms = rng.permuted(np.tile(base, (p, 1)), axis=1)
        exceed += int(np.count_nonzero(sign * _quad_stat(M, perms, n, m) >= cutoff))
        done += p
    p_value = (1 + exceed) / (1 + n_permutations)
    return DetectionVerdict(statistic_kind, float(observed), float(p_value), alpha, p_value < alpha, n, m)


@dataclass(frozen=True)
class SampleSizeRow:
    size: int
    rejection_fraction: float
    trials: int


@dataclass(frozen=True)
class SampleSizeResult:
    rows: tuple[SampleSizeRow, ...]
    min_detected: int | None  # None means "undetected"
    threshold: float
    skipped: tuple[int, ...] = ()


def min_sample_size(
    benign,
    adversarial,
    sizes: Sequence[int] = (50, 100, 500, 1000),
    trials: int = 20,
    seed: int = 0,
    statistic_kind: str = MMD,
    n_permutations: int = 200,
    alpha: float = 0.05,
    threshold: float = 0.9,
    kernel: KernelSpec = KernelSpec(),
) -> SampleSizeResult:
    """Rejection fraction per subsample size and the smallest size reaching `threshold`."""
    benign = np.asarray(benign, dtype=float)
    adversarial = np.asarray(adversarial, dtype=float)
    rows, skipped = [], []
    for size in sizes:
        if size > len(adversarial) or size > len(benign) or size < 2:
            log.warning("skipping sample size %d (pools: benign %d, adversarial %d)", size, len(benign), len(adversarial))
            skipped.append(size)
            continue
        rejected = 0
        for t in range(trials):
            rng = np.random.default_rng(canonical.derive_seed(seed, "size", size, t))
            ref = benign[rng.choice(len(benign), size, replace=False)]
            cand = adversarial[rng.choice(len(adversarial), size, replace=False)]
            v = two_sample_test(ref, cand, statistic_kind, n_permutations, alpha, int(rng.integers(2**63 - 1)), kernel)
            rejected += v.reject_h0
        rows.append(SampleSizeRow(size, rejected / trials, trials))
    hit = [r.size for r in rows if r.rejection_fraction >= threshold]
    return SampleSizeResult(tuple(rows), min(hit) if hit else None, threshold, tuple(skipped))


def mixture_test(
    adversarial,
    benign,
    benign_proportions: Sequence[float] = tuple(i / 10 for i in range(11)),
    size: int = 100,
    trials: int = 20,
    seed: int = 0,
    statistic_kind: str = MMD,
    n_permutations: int = 200,
    alpha: float = 0.05,
    kernel: KernelSpec = KernelSpec(),
) -> list[tuple[float, float]]:
    """(benign proportion, H0 acceptance fraction) for batches mixing
    floor(p * size) benign rows with adversarial rows, each tested against a
    fresh benign reference disjoint from the mixed-in benign rows."""
    benign = np.asarray(benign, dtype=float)
    adversarial = np.asarray(adversarial, dtype=float)
    if len(benign) < 2 * size or len(adversarial) < size:
        raise SampleSizeError(f"pools too small for size {size}")
    curve = []
    for p in benign_proportions:
        if not 0.0 <= p <= 1.0:
            raise InvalidInputError("proportions must lie in [0, 1]")
        n_benign = int(np.floor(p * size + 1e-9))
        accepted = 0
        for t in range(trials):
            rng = np.random.default_rng(canonical.derive_seed(seed, "mix", f"{p:.6f}", t))
            pick = rng.choice(len(benign), size + n_benign, replace=False)
            ref = benign[pick[:size]]
            parts = [benign[pick[size:]]]
            if size - n_benign:
                parts.append(adversarial[rng.choice(len(adversarial), size - n_benign, replace=False)])
            v = two_sample_test(ref, np.vstack(parts), statistic_kind, n_permutations, alpha, int(rng.integers(2**63 - 1)), kernel)
            accepted += not v.reject_h0
        curve.append((float(p), accepted / trials))
    return curve
