"""Confusion matrices, accuracy/precision/recall/F1, per-user splits, reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from canforest.errors import ClassMismatchError, EmptyInputError, InvalidInputError
from canforest.features import LabeledDataset
from canforest.types import TrafficClass


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_dict(self) -> dict:
        return {"class_names": list(self.class_names), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfusionMatrix":
        return cls(np.asarray(d["counts"], dtype=np.int64), tuple(d["class_names"]))


@dataclass(frozen=True)
class ClassScores:
    tp: int
    tn: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: dict[str, ClassScores]
    # classes whose precision/recall hit 0/0 and were defined as 0
    degenerate: tuple[str, ...] = field(default=())
    confusion: ConfusionMatrix | None = None

    def to_dict(self) -> dict:
        return {
            "accuracy": sig6(self.accuracy),
            "precision": sig6(self.precision),
            "recall": sig6(self.recall),
            "f1": sig6(self.f1),
            "degenerate": list(self.degenerate),
            "per_class": {
                c: {
                    "tp": s.tp, "tn": s.tn, "fp": s.fp, "fn": s.fn, "support": s.support,
                    "precision": sig6(s.precision), "recall": sig6(s.recall), "f1": sig6(s.f1),
                }
                for c, s in self.per_class.items()
            },
            "confusion": self.confusion.to_dict() if self.confusion is not None else None,
        }


def sig6(v: float) -> float:
    return float(f"{v:.6g}")


def _div(a: float, b: float) -> float:
    return a / b if b else 0.0


def confusion_from_labels(y_true, y_pred, class_names: Sequence[str]) -> ConfusionMatrix:
    C = len(class_names)
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    counts = np.zeros((C, C), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts, tuple(class_names))


def confusion(model, test: LabeledDataset) -> ConfusionMatrix:
    if len(test) == 0:
        raise EmptyInputError("empty test set")
    names = tuple(model.class_names)
    unknown = [c for c in set(test.labels) if c not in names]
    if unknown:
        raise ClassMismatchError(f"test classes {sorted(unknown)} unknown to the model")
    remap = np.array([names.index(c) for c in test.class_names])
    return confusion_from_labels(remap[test.y], model.predict(test.X), names)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class one-vs-rest scores, macro-averaged over classes with support.

    Classes that never occur as ground truth (e.g. the Adversarial column when a
    5-class model is scored on benign rows) are still reported per class but do
    not enter the macro averages.
    """
    counts = np.asarray(cm.counts, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        raise EmptyInputError("empty confusion matrix")
    per_class, degenerate = {}, []
    for i, name in enumerate(cm.class_names):
        tp = int(counts[i, i])
        fp = int(counts[:, i].sum() - tp)
        fn = int(counts[i, :].sum() - tp)
        tn = total - tp - fp - fn
        if tp + fp == 0 or tp + fn == 0:
            degenerate.append(name)
        per_class[name] = ClassScores(
            tp, tn, fp, fn, _div(tp, tp + fp), _div(tp, tp + fn), _div(2 * tp, 2 * tp + fp + fn), tp + fn
        )
    supported = [s for s in per_class.values() if s.support > 0]
    return MetricsReport(
        accuracy=float(np.trace(counts)) / total,
        precision=float(np.mean([s.precision for s in supported])),
        recall=float(np.mean([s.recall for s in supported])),
        f1=float(np.mean([s.f1 for s in supported])),
        per_class=per_class,
        degenerate=tuple(degenerate),
        confusion=cm,
    )


def evaluate(model, test: LabeledDataset) -> MetricsReport:
    return metrics(confusion(model, test))


def batch_as_dataset(batch, class_names: Sequence[str]) -> LabeledDataset:
    """Perturbed rows of an AdversarialBatch labelled for `class_names`.

    A model that knows the Adversarial class is scored against that label; any
    other model against the rows' original ground truth.
    """
    class_names = tuple(class_names)
    adv = TrafficClass.ADVERSARIAL.value
    if adv in class_names:
        y = np.full(len(batch), class_names.index(adv), dtype=np.int64)
    else:
        y = np.array([class_names.index(c) for c in batch.labels], dtype=np.int64)
    return LabeledDataset(batch.perturbed, y, class_names)


def per_user_eval(model, benign: LabeledDataset, batches: Sequence, n_users: int, seed: int = 0):
    """Split benign rows and every batch equally across users and score each user.

    Returns (per-user reports, mean accuracy/precision/recall/f1 dict).
    """
    if n_users < 1:
        raise InvalidInputError("n_users must be >= 1")
    names = tuple(model.class_names)
    pools = [benign.with_classes(names) if benign.class_names != names else benign]
    pools += [batch_as_dataset(b, names) for b in batches]
    if any(len(p) < n_users for p in pools):
        raise InvalidInputError(f"a pool has fewer rows than n_users={n_users}")
    rng = np.random.default_rng(seed)
    splits = [np.array_split(rng.permutation(len(p)), n_users) for p in pools]
    reports = []
    for u in range(n_users):
        parts = [p.subset(np.sort(s[u])) for p, s in zip(pools, splits)]
        reports.append(evaluate(model, LabeledDataset.concat(parts)))
    mean = {k: float(np.mean([getattr(r, k) for r in reports])) for k in ("accuracy", "precision", "recall", "f1")}
    return reports, mean
