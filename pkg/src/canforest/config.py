"""Experiment configuration: one YAML file, validated in full before anything runs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from canforest import canonical
from canforest.attacks import parse_method
from canforest.errors import CanForestError, ConfigError
from canforest.features import FeatureParams
from canforest.forest import ForestParams
from canforest.substitutes import MlpParams, SvmParams
from canforest.types import BENIGN_CLASSES, TrafficClass


@dataclass(frozen=True)
class LogSource:
    path: str
    traffic_class: str


@dataclass(frozen=True)
class DataConfig:
    frames_per_class: int = 20000
    classes: tuple[str, ...] = BENIGN_CLASSES
    logs: tuple[LogSource, ...] = ()  # when non-empty, replaces synthetic data
    surrogate_fraction: float = 0.3
    test_fraction: float = 0.2


@dataclass(frozen=True)
class DetectorConfig:
    statistic: str = "MMD"
    permutations: int = 1000
    alpha: float = 0.05
    bandwidth: float | None = None
    sizes: tuple[int, ...] = (50, 100, 500, 1000)
    trials: int = 20
    threshold: float = 0.9
    mode: str = "class"
    proportions: tuple[float, ...] = tuple(i / 10 for i in range(11))
    mixture_size: int = 100
    mixture_methods: tuple[str, ...] = ("fgsm0.5", "svm")
    table_permutations: int = 200
    max_rows: int = 1000


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    miners: int = 5
    data: DataConfig = field(default_factory=DataConfig)
    features: FeatureParams = field(default_factory=FeatureParams)
    forest: ForestParams = field(default_factory=ForestParams)
    mlp: MlpParams = field(default_factory=MlpParams)
    svm: SvmParams = field(default_factory=SvmParams)
    attacks: tuple[str, ...] = (
        "fgsm0.01", "fgsm0.08", "fgsm0.15", "fgsm0.22", "fgsm0.29", "fgsm0.36", "fgsm0.4", "fgsm0.5",
        "jsma", "svm", "dt",
    )
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    augment_methods: tuple[str, ...] = ("fgsm0.36", "svm")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def experiment_dict(self) -> dict:
        """Everything that affects results; the output location does not."""
        d = self.to_dict()
        del d["output_dir"]
        return d

    def digest(self) -> str:
        return canonical.sha256(canonical.dump_bytes(self.experiment_dict())).hex()


_SECTIONS = {
    "data": DataConfig,
    "features": FeatureParams,
    "forest": ForestParams,
    "mlp": MlpParams,
    "svm": SvmParams,
    "detector": DetectorConfig,
}


def _build(cls, raw: Any, where: str, errors: list[str]):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        errors.append(f"{where}: expected a mapping")
        return cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            errors.append(f"{where}.{key}: unknown key")
            continue
        if cls is DataConfig and key == "logs":
            value = tuple(_log_source(v, f"{where}.logs[{i}]", errors) for i, v in enumerate(value or []))
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append(f"{where}: {exc}")
        return cls()


def _log_source(raw, where: str, errors: list[str]) -> LogSource:
    if not isinstance(raw, dict) or set(raw) != {"path", "class"}:
        errors.append(f"{where}: expected {{path, class}}")
        return LogSource("", "")
    return LogSource(str(raw["path"]), str(raw["class"]))


def _int(v, lo=None) -> bool:
    return isinstance(v, int) and not isinstance(v, bool) and (lo is None or v >= lo)


def validate(cfg: ExperimentConfig, base_dir: Path | None = None) -> list[str]:
    """Every violation, not just the first."""
    v: list[str] = []
    base = base_dir or Path.cwd()
    if not _int(cfg.seed, 0):
        v.append("seed: must be a non-negative integer")
    if not _int(cfg.miners, 1):
        v.append("miners: k must be an integer >= 1")
    d = cfg.data
    if not _int(d.frames_per_class, 1):
        v.append("data.frames_per_class: must be a positive integer")
    for c in d.classes:
        try:
            if TrafficClass.parse(c) is TrafficClass.ADVERSARIAL:
                v.append("data.classes: Adversarial is added by augmentation only")
        except (ValueError, CanForestError):
            v.append(f"data.classes: unknown class {c!r}")
    for i, src in enumerate(d.logs):
        if src.path and not (base / src.path).exists():
            v.append(f"data.logs[{i}].path: {src.path} does not exist")
        try:
            TrafficClass.parse(src.traffic_class)
        except (ValueError, CanForestError):
            v.append(f"data.logs[{i}].class: unknown class {src.traffic_class!r}")
    for name in ("surrogate_fraction", "test_fraction"):
        if not 0 < getattr(d, name) < 1:
            v.append(f"data.{name}: must be in (0, 1)")
    if d.surrogate_fraction + d.test_fraction >= 1:
        v.append("data: surrogate_fraction + test_fraction must leave training rows")
    f = cfg.features
    if not _int(f.window_frames, 16):
        v.append("features.window_frames: must be >= 16")
    if not _int(f.stride, 1):
        v.append("features.stride: must be >= 1")
    if not _int(f.shannon_bins, 2):
        v.append("features.shannon_bins: must be >= 2")
    if not (_int(f.permen_order, 2) and _int(f.permen_delay, 1) and _int(f.sampen_m, 1)):
        v.append("features: permen_order >= 2, permen_delay >= 1, sampen_m >= 1")
    if not f.sampen_r > 0:
        v.append("features.sampen_r: must be positive")
    p = cfg.forest
    if not (_int(p.n_trees, 1) and _int(p.max_depth, 1) and _int(p.min_leaf, 1)):
        v.append("forest: n_trees, max_depth, min_leaf must be positive integers")
    if not (_int(p.feature_subsample, 1) and p.feature_subsample <= 9):
        v.append("forest.feature_subsample: must be in 1..9")
    if not (_int(cfg.mlp.hidden, 1) and _int(cfg.mlp.epochs, 1) and _int(cfg.mlp.batch_size, 1) and cfg.mlp.lr > 0):
        v.append("mlp: hidden, epochs, batch_size positive integers and lr > 0")
    if not (_int(cfg.svm.epochs, 1) and cfg.svm.lr > 0 and cfg.svm.reg >= 0):
        v.append("svm: epochs >= 1, lr > 0, reg >= 0")
    for group, methods in (("attacks", cfg.attacks), ("augment_methods", cfg.augment_methods),
                           ("detector.mixture_methods", cfg.detector.mixture_methods)):
        for m in methods:
            try:
                parse_method(m)
            except CanForestError as exc:
                v.append(f"{group}: {exc}")
    if not cfg.augment_methods:
        v.append("augment_methods: select at least one method")
    det = cfg.detector
    if det.statistic not in ("MMD", "ED"):
        v.append("detector.statistic: must be MMD or ED")
    if not 0 < det.alpha < 1:
        v.append("detector.alpha: must be in (0, 1)")
    if not (_int(det.permutations, 100) and _int(det.table_permutations, 100)):
        v.append("detector: permutations and table_permutations must be >= 100")
    if det.bandwidth is not None and not det.bandwidth > 0:
        v.append("detector.bandwidth: must be positive or null")
    if not det.sizes or not all(_int(s, 2) for s in det.sizes):
        v.append("detector.sizes: integers >= 2")
    if not _int(det.trials, 1):
        v.append("detector.trials: must be >= 1")
    if not 0 < det.threshold <= 1:
        v.append("detector.threshold: must be in (0, 1]")
    if det.mode not in ("class", "pooled"):
        v.append("detector.mode: class or pooled")
    if not all(0 <= q <= 1 for q in det.proportions):
        v.append("detector.proportions: values in [0, 1]")
    if not _int(det.mixture_size, 2):
        v.append("detector.mixture_size: must be >= 2")
    if not _int(det.max_rows, 2):
        v.append("detector.max_rows: must be >= 2")
    return v


def from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected a mapping"])
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key not in top:
            errors.append(f"{key}: unknown key")
        elif key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key, errors)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    cfg = ExperimentConfig(**kwargs)
    errors += validate(cfg, base_dir)
    if errors:
        raise ConfigError(errors)
    return cfg


def load(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a YAML config; `overrides` maps dotted keys (``forest.n_trees``) to values."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError([f"{path}: {exc}"]) from None
    for dotted, value in (overrides or {}).items():
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return from_dict(raw, path.parent)
