"""CAN-ID cycle windows -> FFT magnitude spectrum -> 9 statistical/entropy features."""

from __future__ import annotations

import csv
import math
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from canforest.errors import EmptyInputError, InvalidInputError
from canforest.types import BENIGN_CLASSES, CanLog, TrafficClass

FEATURE_NAMES = ("min", "max", "mean", "std", "skewness", "kurtosis", "shannon", "sampen", "permen")
N_FEATURES = len(FEATURE_NAMES)
CSV_HEADER = FEATURE_NAMES + ("label",)

# Test builds flip this on to verify Parseval on every transform.
CHECK_PARSEVAL = bool(os.environ.get("CANFOREST_CHECK_PARSEVAL"))


@dataclass(frozen=True)
class CycleSeries:
    """Occurrence count of each CAN ID inside one window, ordered by ascending ID."""

    ids: np.ndarray
    counts: np.ndarray
    label: TrafficClass


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    label: str | None = None


@dataclass(frozen=True)
class NormState:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        if np.any(self.max < self.min):
            raise InvalidInputError("NormState max below min")

    def to_dict(self) -> dict:
        return {"min": [float(v) for v in self.min], "max": [float(v) for v in self.max]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormState":
        return cls(np.asarray(d["min"], dtype=float), np.asarray(d["max"], dtype=float))


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix `X` (n x 9) with integer labels indexing `class_names`."""

    X: np.ndarray
    y: np.ndarray
    class_names: tuple[str, ...]
    norm: NormState | None = field(default=None, compare=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float).reshape(-1, N_FEATURES)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise InvalidInputError("X and y lengths differ")
        if y.size and (y.min() < 0 or y.max() >= len(self.class_names)):
            raise InvalidInputError("label outside class_names")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def labels(self) -> list[str]:
        return [self.class_names[i] for i in self.y]

    @property
    def rows(self) -> list[FeatureVector]:
        return [FeatureVector(self.X[i], self.class_names[self.y[i]]) for i in range(len(self))]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        if idx.size == 0:
            idx = idx.astype(np.int64)
        return replace(self, X=self.X[idx], y=self.y[idx])

    def of_class(self, name: str) -> "LabeledDataset":
        return self.subset(np.flatnonzero(self.y == self.class_names.index(name)))

    def with_classes(self, class_names: Sequence[str]) -> "LabeledDataset":
        """Re-index labels against a superset class list."""
        class_names = tuple(class_names)
        remap = np.array([class_names.index(c) for c in self.class_names], dtype=np.int64)
        return replace(self, y=remap[self.y] if len(self) else self.y, class_names=class_names)

    @staticmethod
    def concat(parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        if not parts:
            raise EmptyInputError("nothing to concatenate")
        names = parts[0].class_names
        if any(p.class_names != names for p in parts):
            raise InvalidInputError("class_names differ between parts")
        return LabeledDataset(
            np.vstack([p.X for p in parts]), np.concatenate([p.y for p in parts]), names, parts[0].norm
        )


# --------------------------------------------------------------------------
# windowing and spectrum


def window_cycles(log: CanLog, window_frames: int = 200, stride: int = 200) -> list[CycleSeries]:
    if window_frames < 16 or stride < 1:
        raise InvalidInputError("window_frames must be >= 16 and stride >= 1")
    n = len(log)
    if n < window_frames:
        raise EmptyInputError(f"log has {n} frames, shorter than one {window_frames}-frame window")
    ids = np.fromiter((f.can_id for f in log.frames), dtype=np.int64, count=n)
    order = list(TrafficClass)
    labels = [f.label for f in log.frames]
    out = []
    for start in range(0, n - window_frames + 1, stride):
        uniq, counts = np.unique(ids[start:start + window_frames], return_counts=True)
        tally = Counter(labels[start:start + window_frames])
        top = max(tally.values())
        label = min((c for c, k in tally.items() if k == top), key=order.index)
        out.append(CycleSeries(uniq, counts.astype(float), label))
    return out


def _next_pow2(n: int) -> int:
    return 1 << max(n - 1, 0).bit_length()


def fft_magnitude(series) -> np.ndarray:
    """|DFT| of the series zero-padded to the next power of two (real half-spectrum)."""
    x = np.asarray(getattr(series, "counts", series), dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise InvalidInputError("series needs at least 2 points")
    n = _next_pow2(x.size)
    mag = np.abs(np.fft.rfft(x, n=n))
    if CHECK_PARSEVAL:
        _assert_parseval(x, mag, n)
    return mag


def _assert_parseval(x, mag, n):
    # full-spectrum energy from the half spectrum: interior bins appear twice
    energy = mag[0] ** 2 + 2.0 * np.sum(mag[1:-1] ** 2) + mag[-1] ** 2
    expected = n * np.sum(x * x)
    if not math.isclose(energy, expected, rel_tol=1e-9, abs_tol=1e-12):
        raise AssertionError(f"Parseval violated: {energy} vs {expected}")


# --------------------------------------------------------------------------
# entropies


def shannon_entropy(values, bins: int = 10) -> float:
    v = np.asarray(values, dtype=float)
    if v.size < 1 or bins < 2:
        raise InvalidInputError("need >= 1 value and >= 2 bins")
    lo, hi = v.min(), v.max()
    if lo == hi:
        return 0.0
    counts, _ = np.histogram(v, bins=bins, range=(lo, hi))
    p = counts[counts > 0] / v.size
    return float(-np.sum(p * np.log2(p)))


def _match_count(templates: np.ndarray, tol: float) -> int:
    d = np.max(np.abs(templates[:, None, :] - templates[None, :, :]), axis=2)
    return int((np.count_nonzero(d <= tol) - templates.shape[0]) // 2)


def sample_entropy(values, m: int = 2, r: float = 0.2) -> float:
    """SampEn with tolerance r*std; undefined cases (no matches) return 0."""
    x = np.asarray(values, dtype=float)
    n = x.size
    if n < m + 2:
        raise InvalidInputError(f"sample entropy needs at least m+2={m + 2} points")
    tol = r * np.std(x)
    # the same n-m template starts are used for both lengths
    idx = np.arange(n - m)[:, None]
    t_m1 = x[idx + np.arange(m + 1)]
    b = _match_count(t_m1[:, :m], tol)
    a = _match_count(t_m1, tol)
    if a == 0 or b == 0:
        return 0.0
    return float(-math.log(a / b))


def permutation_entropy(values, order: int = 3, delay: int = 1) -> float:
    """Normalized permutation entropy; ties rank the earlier index lower."""
    x = np.asarray(values, dtype=float)
    if order < 2 or delay < 1 or x.size < order * delay + 1:
        raise InvalidInputError("series too short for the requested order/delay")
    n_vec = x.size - (order - 1) * delay
    emb = x[np.arange(n_vec)[:, None] + delay * np.arange(order)]
    patterns = np.argsort(emb, axis=1, kind="stable")
    _, counts = np.unique(patterns, axis=0, return_counts=True)
    p = counts / n_vec
    return float(-np.sum(p * np.log2(p)) / math.log2(math.factorial(order)))


def _moments(x: np.ndarray) -> tuple[float, float]:
    mu = x.mean()
    c = x - mu
    m2 = np.mean(c * c)
    if m2 <= 1e-24 * max(1.0, mu * mu):
        return 0.0, 0.0
    skew = np.mean(c ** 3) / m2 ** 1.5
    kurt = np.mean(c ** 4) / m2 ** 2 - 3.0
    return float(skew), float(kurt)


@dataclass(frozen=True)
class FeatureParams:
    window_frames: int = 200
    stride: int = 200
    shannon_bins: int = 10
    sampen_m: int = 2
    sampen_r: float = 0.2
    permen_order: int = 3
    permen_delay: int = 1


def extract_features(spectrum, params: FeatureParams = FeatureParams()) -> np.ndarray:
    s = np.asarray(spectrum, dtype=float)
    if s.size < 4:
        raise InvalidInputError("spectrum needs at least 4 bins")
    skew, kurt = _moments(s)
    return np.array([
        s.min(),
        s.max(),
        s.mean(),
        s.std(),
        skew,
        kurt,
        shannon_entropy(s, params.shannon_bins),
        sample_entropy(s, params.sampen_m, params.sampen_r),
        permutation_entropy(s, params.permen_order, params.permen_delay),
    ])


def _spectrum_of(cycle: CycleSeries) -> np.ndarray:
    counts = cycle.counts
    # A window seen on fewer than 4 IDs still yields a >= 4-bin spectrum.
    if counts.size < 6:
        counts = np.concatenate([counts, np.zeros(6 - counts.size)])
    return fft_magnitude(counts)


def build_dataset(
    logs: Sequence[CanLog],
    params: FeatureParams = FeatureParams(),
    class_names: Sequence[str] = BENIGN_CLASSES,
    cycle_fn: Callable[[CanLog, int, int], list[CycleSeries]] = window_cycles,
) -> LabeledDataset:
    """Concatenate per-window feature vectors of every log (norm unset)."""
    if not logs:
        raise EmptyInputError("no logs given")
    class_names = tuple(class_names)
    rows, labels = [], []
    for log in logs:
        for cyc in cycle_fn(log, params.window_frames, params.stride):
            rows.append(extract_features(_spectrum_of(cyc), params))
            labels.append(class_names.index(cyc.label.value))
    return LabeledDataset(np.array(rows), np.array(labels), class_names)


# --------------------------------------------------------------------------
# normalization


def fit_norm(dataset: LabeledDataset) -> NormState:
    if len(dataset) == 0:
        raise EmptyInputError("cannot fit normalization on an empty dataset")
    return NormState(dataset.X.min(axis=0), dataset.X.max(axis=0))


def apply_norm(norm: NormState, x):
    """Min-max scale to [0, 1] with clipping; constant features map to 0."""
    values = getattr(x, "values", x)
    arr = np.asarray(values, dtype=float)
    span = norm.max - norm.min
    safe = np.where(span > 0, span, 1.0)
    with np.errstate(over="ignore"):  # far-out values overflow to inf and clip to 1
        out = np.where(span > 0, (arr - norm.min) / safe, 0.0)
    out = np.clip(out, 0.0, 1.0)
    if isinstance(x, FeatureVector):
        return FeatureVector(out, x.label)
    return out


def normalize(dataset: LabeledDataset, norm: NormState | None = None) -> LabeledDataset:
    """Scale with `norm`, fitting it on `dataset` first when not given."""
    norm = fit_norm(dataset) if norm is None else norm
    return replace(dataset, X=apply_norm(norm, dataset.X), norm=norm)


# --------------------------------------------------------------------------
# CSV


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def write_feature_csv(
    dataset: LabeledDataset, path: str | Path, extra: dict[str, Iterable] | None = None
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    extra = {k: list(v) for k, v in (extra or {}).items()}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER + tuple(extra))
        for i in range(len(dataset)):
            row = [_fmt(v) for v in dataset.X[i]] + [dataset.class_names[dataset.y[i]]]
            row += [str(col[i]) for col in extra.values()]
            w.writerow(row)
    tmp.replace(path)


def read_feature_csv(
    path: str | Path, class_names: Sequence[str] = BENIGN_CLASSES
) -> tuple[LabeledDataset, dict[str, list[str]]]:
    """Load a feature CSV; columns after `label` are returned as raw strings."""
    class_names = tuple(class_names)
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[: len(CSV_HEADER)]) != CSV_HEADER:
            raise InvalidInputError(f"{path}: unexpected header {header}")
        extra_names = header[len(CSV_HEADER):]
        X, y, extra = [], [], {k: [] for k in extra_names}
        for row in reader:
            X.append([float(v) for v in row[:N_FEATURES]])
            y.append(class_names.index(row[N_FEATURES]))
            for k, v in zip(extra_names, row[len(CSV_HEADER):]):
                extra[k].append(v)
    return LabeledDataset(np.array(X).reshape(-1, N_FEATURES), np.array(y, dtype=np.int64), class_names), extra
