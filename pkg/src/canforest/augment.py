"""Sandbox capture of flagged batches and retraining with an Adversarial class."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from canforest import canonical
from canforest.attacks import AdversarialBatch, read_batch_csv, write_batch_csv
from canforest.detector import DetectionVerdict
from canforest.errors import CaptureRefused, EmptyAugmentationError, EmptyInputError, TrainingError
from canforest.features import LabeledDataset
from canforest.forest import FederatedForest, ForestParams
from canforest.registry import Registry, train_registered
from canforest.types import TrafficClass

ADV = TrafficClass.ADVERSARIAL.value


@dataclass(frozen=True)
class CapturedBatch:
    batch: AdversarialBatch
    verdict: DetectionVerdict
    captured_at: float


@dataclass
class Sandbox:
    """Quarantine of detector-flagged batches. Only rejected-H0 batches get in."""

    captured: list[CapturedBatch] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.captured)

    def snapshot(self) -> tuple[CapturedBatch, ...]:
        return tuple(self.captured)

    def save(self, root: str | Path, class_names: Sequence[str]) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for i, cap in enumerate(self.captured):
            stem = f"{i:03d}_{cap.batch.method}"
            write_batch_csv(cap.batch, root / f"{stem}.csv", class_names)
            meta = {
                "method": cap.batch.method,
                "params": cap.batch.params,
                "substitute_id": cap.batch.substitute_id,
                "rows": len(cap.batch),
                "captured_at": cap.captured_at,
                "verdict": cap.verdict.to_dict(),
            }
            (root / f"{stem}.json").write_text(canonical.dumps(meta) + "\n")

    @classmethod
    def load(cls, root: str | Path, class_names: Sequence[str]) -> "Sandbox":
        box = cls()
        for meta_path in sorted(Path(root).glob("*.json")):
            meta = canonical.loads(meta_path.read_text())
            csv_path = meta_path.with_suffix(".csv")
            b = read_batch_csv(csv_path, np.zeros((meta["rows"], 9)), class_names)
            b = AdversarialBatch(b.originals, b.perturbed, b.labels, meta["method"], meta["params"], b.success, meta["substitute_id"])
            box.captured.append(CapturedBatch(b, DetectionVerdict.from_dict(meta["verdict"]), meta["captured_at"]))
        return box


def capture(sandbox: Sandbox, batch: AdversarialBatch, verdict: DetectionVerdict, timestamp: float | None = None) -> None:
    if not verdict.reject_h0:
        raise CaptureRefused(f"{batch.method}: detector accepted H0 (p={verdict.p_value:.4g}); not captured")
    sandbox.captured.append(CapturedBatch(batch, verdict, time.time() if timestamp is None else float(timestamp)))


@dataclass(frozen=True)
class AugmentedDataset:
    dataset: LabeledDataset
    provenance: dict[str, int]  # method tag -> Adversarial rows contributed


def build_augmented(
    original: LabeledDataset, sandbox: Sandbox, methods: Sequence[str] | None = None
) -> AugmentedDataset:
    """Original rows keep their labels; every selected captured row becomes Adversarial."""
    chosen = [c for c in sandbox.snapshot() if methods is None or c.batch.method in set(methods)]
    if not chosen:
        raise EmptyAugmentationError(f"sandbox holds no batches for methods {methods}")
    names = original.class_names if ADV in original.class_names else original.class_names + (ADV,)
    base = original.with_classes(names)
    adv_rows = np.vstack([c.batch.perturbed for c in chosen])
    adv = LabeledDataset(adv_rows, np.full(len(adv_rows), names.index(ADV)), names)
    provenance: dict[str, int] = {}
    for c in chosen:
        provenance[c.batch.method] = provenance.get(c.batch.method, 0) + len(c.batch)
    return AugmentedDataset(LabeledDataset.concat([base, adv]), provenance)


def retrain_augmented(
    aug: AugmentedDataset,
    k: int,
    params: ForestParams = ForestParams(),
    seed: int = 0,
    registry: Registry | None = None,
    timestamp: float | None = None,
) -> FederatedForest:
    """Rerun shard -> partials -> registry -> aggregate on the augmented data."""
    present = set(aug.dataset.labels)
    if ADV not in present or len(present) < len(aug.dataset.class_names):
        raise TrainingError(f"augmented data must cover all classes {aug.dataset.class_names}")
    model, _ = train_registered(aug.dataset, k, params, seed, registry, timestamp)
    return model


def detection_rate(model, batch: AdversarialBatch) -> float:
    """Share of perturbed rows flagged Adversarial (augmented model) or, for a
    model without that class, classified as their original ground truth."""
    if len(batch) == 0:
        raise EmptyInputError("empty batch")
    names = tuple(model.class_names)
    pred = model.predict(batch.perturbed)
    if ADV in names:
        return float(np.mean(pred == names.index(ADV)))
    truth = np.array([names.index(c) for c in batch.labels])
    return float(np.mean(pred == truth))


def recovered_rate(old_rate: float, new_rate: float) -> float:
    """Percentage-point gain in detection rate."""
    return (new_rate - old_rate) * 100.0
