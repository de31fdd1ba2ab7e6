"""Adversarial feature crafting (FGSM, JSMA, SVM, DT) and transferability.

All attacks work in normalized feature space and keep every value in [0, 1].
The target forest is only ever queried through `predict`.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from canforest import canonical
from canforest.errors import AttackError, EmptyInputError, InvalidInputError
from canforest.features import LabeledDataset, N_FEATURES, read_feature_csv, write_feature_csv
from canforest.forest import DecisionTree
from canforest.substitutes import MlpSubstitute, SvmSubstitute, _label_index, _softmax, encode_substitute, mlp_jacobian


@dataclass(frozen=True)
class Fgsm:
    eps: float

    @property
    def tag(self) -> str:
        return f"fgsm{self.eps:g}"


@dataclass(frozen=True)
class Jsma:
    theta: float = 0.1
    gamma: float = 0.5

    @property
    def tag(self) -> str:
        return "jsma"


@dataclass(frozen=True)
class SvmAttack:
    lam: float = 1.0

    @property
    def tag(self) -> str:
        return "svm"


@dataclass(frozen=True)
class DtAttack:
    step: float = 0.05

    @property
    def tag(self) -> str:
        return "dt"


Method = Union[Fgsm, Jsma, SvmAttack, DtAttack]


def parse_method(text: str) -> Method:
    """`fgsm0.36`, `jsma`, `svm`, `dt`; optional `:value` sets JSMA theta, SVM lambda, DT step."""
    t = text.strip().lower()
    m = re.fullmatch(r"fgsm[:(]?([0-9.]+)\)?", t)
    if m:
        return Fgsm(float(m.group(1)))
    name, _, val = t.partition(":")
    if name == "jsma":
        return Jsma(float(val)) if val else Jsma()
    if name in ("svm", "svm-attack"):
        return SvmAttack(float(val)) if val else SvmAttack()
    if name in ("dt", "dt-attack"):
        return DtAttack(float(val)) if val else DtAttack()
    raise InvalidInputError(f"unknown attack method {text!r}")


# --------------------------------------------------------------------------
# per-sample attacks


def _mlp_loss_gradients(m: MlpSubstitute, X: np.ndarray, labels: np.ndarray) -> np.ndarray:
    W1, W2, W3 = m.weights
    b1, b2, b3 = m.biases
    z1 = X @ W1 + b1
    z2 = np.maximum(z1, 0.0) @ W2 + b2
    p = _softmax(np.maximum(z2, 0.0) @ W3 + b3)
    p[np.arange(len(X)), labels] -= 1.0
    g = (p @ W3.T) * (z2 > 0)
    g = (g @ W2.T) * (z1 > 0)
    return g @ W1.T


def fgsm(m: MlpSubstitute, x, label, eps: float) -> np.ndarray:
    """x' = clip(x + eps * sign(grad_x loss)), with sign(0) = 0."""
    if eps < 0:
        raise InvalidInputError("eps must be non-negative")
    x = np.asarray(getattr(x, "values", x), dtype=float)
    k = _label_index(m.class_names, label)
    g = _mlp_loss_gradients(m, x.reshape(1, -1), np.array([k]))[0]
    return np.clip(x + eps * np.sign(g), 0.0, 1.0)


def jsma(m: MlpSubstitute, x, label, theta: float = 0.1, gamma: float = 0.5) -> tuple[np.ndarray, bool]:
    """Non-targeted single-feature saliency attack.

    Each step takes the unmodified feature whose change by `theta` most reduces
    the true-class probability (from the Jacobian) and applies that change.
    Stops once the substitute misclassifies, after ceil(gamma * 9) features, or
    when no feature has usable saliency left. Returns (x', success).
    """
    if not 0 < gamma <= 1:
        raise InvalidInputError("gamma must be in (0, 1]")
    x = np.asarray(getattr(x, "values", x), dtype=float).copy()
    k = _label_index(m.class_names, label)
    budget = math.ceil(gamma * N_FEATURES)
    modified: set[int] = set()
    direction = np.sign(theta)
    while m.predict(x)[0] == k and len(modified) < budget:
        saliency = -direction * mlp_jacobian(m, x)[k]
        room = x < 1.0 if direction > 0 else x > 0.0
        usable = room & (saliency > 0)
        usable[list(modified)] = False
        if not usable.any():
            break
        i = int(np.argmax(np.where(usable, saliency, -np.inf)))
        x[i] = min(max(x[i] + theta, 0.0), 1.0)
        modified.add(i)
    return x, bool(m.predict(x)[0] != k)


def svm_attack(s: SvmSubstitute, x, lam: float = 1.0) -> np.ndarray:
    """Step of length `lam` against the hyperplane normal of the predicted class."""
    if lam <= 0:
        raise InvalidInputError("lambda must be positive")
    x = np.asarray(getattr(x, "values", x), dtype=float)
    k = int(s.predict(x)[0])
    w = s.W[k]
    norm = np.linalg.norm(w)
    if norm == 0:
        raise AttackError(f"class {s.class_names[k]} has a zero weight vector")
    return np.clip(x - lam * w / norm, 0.0, 1.0)


def _path_to_root(parents: np.ndarray, node: int) -> list[int]:
    path = [node]
    while parents[path[-1]] >= 0:
        path.append(int(parents[path[-1]]))
    return path


def nearest_other_leaf(tree: DecisionTree, leaf: int) -> int | None:
    """Closest leaf (tree-edge distance, then lowest id) with a different majority class."""
    parents = tree.parents()
    own = tree.leaf_class(leaf)
    dist = {leaf: 0}
    frontier = [leaf]
    while frontier:
        found = [n for n in frontier if tree.is_leaf(n) and tree.leaf_class(n) != own]
        if found:
            return min(found)
        nxt = []
        for n in frontier:
            nbrs = [int(parents[n])] if parents[n] >= 0 else []
            if not tree.is_leaf(n):
                nbrs += [int(tree.left[n]), int(tree.right[n])]
            for nb in nbrs:
                if nb not in dist:
                    dist[nb] = dist[n] + 1
                    nxt.append(nb)
        frontier = sorted(set(nxt))
    return None


def dt_attack(tree: DecisionTree, x, step: float = 0.05) -> tuple[np.ndarray, bool]:
    """Push the split feature of the deepest common ancestor of x's leaf and the
    nearest other-class leaf across its threshold, `step` at a time, until the
    tree's prediction changes or the [0, 1] bound is reached. Returns (x', success).
    """
    if step <= 0:
        raise InvalidInputError("step must be positive")
    if np.unique([tree.leaf_class(n) for n in range(tree.n_nodes) if tree.is_leaf(n)]).size < 2:
        raise AttackError("tree has a single leaf class; no target leaf")
    x = np.asarray(getattr(x, "values", x), dtype=float).copy()
    leaf = int(tree.apply(x)[0])
    original = tree.leaf_class(leaf)
    target = nearest_other_leaf(tree, leaf)
    parents = tree.parents()
    ancestors = set(_path_to_root(parents, target))
    lca = next(n for n in _path_to_root(parents, leaf) if n in ancestors)
    f, thr = int(tree.feature[lca]), float(tree.threshold[lca])
    x0 = x[f]
    sign = 1.0 if x0 <= thr else -1.0
    k = 1
    while True:
        x[f] = min(max(x0 + sign * k * step, 0.0), 1.0)
        if int(tree.predict(x)[0]) != original:
            return x, True
        if x[f] in (0.0, 1.0):
            return x, False
        k += 1


# --------------------------------------------------------------------------
# batches


@dataclass(frozen=True)
class AdversarialBatch:
    originals: np.ndarray
    perturbed: np.ndarray
    labels: tuple[str, ...]
    method: str
    params: dict = field(default_factory=dict)
    success: np.ndarray | None = None
    substitute_id: str = ""

    def __post_init__(self):
        o = np.asarray(self.originals, dtype=float).reshape(-1, N_FEATURES)
        p = np.asarray(self.perturbed, dtype=float).reshape(-1, N_FEATURES)
        if o.shape != p.shape or len(self.labels) != o.shape[0]:
            raise InvalidInputError("originals, perturbed and labels must align")
        if np.any(p < 0.0) or np.any(p > 1.0):
            raise InvalidInputError("perturbed values outside [0, 1]")
        s = np.zeros(o.shape[0], dtype=bool) if self.success is None else np.asarray(self.success, dtype=bool)
        object.__setattr__(self, "originals", o)
        object.__setattr__(self, "perturbed", p)
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "success", s)

    def __len__(self) -> int:
        return self.originals.shape[0]

    def subset(self, idx) -> "AdversarialBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return AdversarialBatch(
            self.originals[idx], self.perturbed[idx], tuple(self.labels[i] for i in idx),
            self.method, self.params, self.success[idx], self.substitute_id,
        )


def _substitute_id(substitute) -> str:
    return canonical.sha256(encode_substitute(substitute)).hex()[:16]


def craft_batch(method: Method, substitute, dataset: LabeledDataset) -> AdversarialBatch:
    """Apply `method` to every row of `dataset` using the matching substitute."""
    X, y = dataset.X, dataset.y
    names = dataset.labels
    if isinstance(method, Fgsm):
        if not isinstance(substitute, MlpSubstitute):
            raise InvalidInputError("FGSM needs an MLP substitute")
        labels = np.array([substitute.class_names.index(c) for c in names], dtype=np.int64)
        if method.eps < 0:
            raise InvalidInputError("eps must be non-negative")
        g = _mlp_loss_gradients(substitute, X, labels) if len(X) else np.zeros_like(X)
        P = np.clip(X + method.eps * np.sign(g), 0.0, 1.0)
        success = substitute.predict(P) != labels if len(X) else np.zeros(0, bool)
        params = {"eps": method.eps}
    elif isinstance(method, Jsma):
        if not isinstance(substitute, MlpSubstitute):
            raise InvalidInputError("JSMA needs an MLP substitute")
        out = [jsma(substitute, X[i], names[i], method.theta, method.gamma) for i in range(len(X))]
        P = np.array([o[0] for o in out]).reshape(-1, N_FEATURES)
        success = np.array([o[1] for o in out], dtype=bool)
        params = {"theta": method.theta, "gamma": method.gamma}
    elif isinstance(method, SvmAttack):
        if not isinstance(substitute, SvmSubstitute):
            raise InvalidInputError("SVM attack needs an SVM substitute")
        P = np.array([svm_attack(substitute, X[i], method.lam) for i in range(len(X))]).reshape(-1, N_FEATURES)
        labels = np.array([substitute.class_names.index(c) for c in names], dtype=np.int64)
        success = substitute.predict(P) != labels if len(X) else np.zeros(0, bool)
        params = {"lambda": method.lam}
    elif isinstance(method, DtAttack):
        if not isinstance(substitute, DecisionTree):
            raise InvalidInputError("DT attack needs a decision-tree substitute")
        out = [dt_attack(substitute, X[i], method.step) for i in range(len(X))]
        P = np.array([o[0] for o in out]).reshape(-1, N_FEATURES)
        success = np.array([o[1] for o in out], dtype=bool)
        params = {"step": method.step}
    else:
        raise InvalidInputError(f"unknown method {method!r}")
    return AdversarialBatch(X.copy(), P, tuple(names), method.tag, params, success, _substitute_id(substitute))


def transferability_rate(target, batch: AdversarialBatch) -> float:
    """Fraction of samples whose target prediction changes under perturbation."""
    if len(batch) == 0:
        raise EmptyInputError("empty batch")
    return float(np.mean(target.predict(batch.originals) != target.predict(batch.perturbed)))


def write_batch_csv(batch: AdversarialBatch, path: str | Path, class_names: Sequence[str]) -> None:
    ds = LabeledDataset(batch.perturbed, [list(class_names).index(c) for c in batch.labels], tuple(class_names))
    write_feature_csv(ds, path, {"method": [batch.method] * len(batch), "success": [int(s) for s in batch.success]})


def read_batch_csv(path: str | Path, originals: np.ndarray, class_names: Sequence[str]) -> AdversarialBatch:
    ds, extra = read_feature_csv(path, class_names)
    method = extra["method"][0] if extra.get("method") else Path(path).stem
    success = np.array([int(s) for s in extra.get("success", [0] * len(ds))], dtype=bool)
    return AdversarialBatch(originals, ds.X, tuple(ds.labels), method, {}, success)
