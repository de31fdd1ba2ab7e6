"""Adversary-side surrogate models: a small ReLU MLP and a one-vs-rest linear SVM.

These only see surrogate feature data; nothing here touches the defender's forest.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from canforest import canonical
from canforest.errors import TrainingError
from canforest.features import N_FEATURES, LabeledDataset
from canforest.forest import DecisionTree, ForestParams, train_tree


@dataclass(frozen=True)
class MlpParams:
    hidden: int = 32
    lr: float = 0.05
    epochs: int = 200
    batch_size: int = 32


@dataclass(frozen=True)
class SvmParams:
    reg: float = 1e-3
    epochs: int = 300
    lr: float = 0.5


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _label_index(class_names, label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    return class_names.index(label)


def _require_classes(train: LabeledDataset) -> None:
    if len(train) == 0 or np.unique(train.y).size < 2:
        raise TrainingError("substitute training needs at least two classes")


@dataclass(frozen=True)
class MlpSubstitute:
    """9 -> H -> H -> C, ReLU hidden layers, softmax output."""

    weights: tuple[np.ndarray, np.ndarray, np.ndarray]
    biases: tuple[np.ndarray, np.ndarray, np.ndarray]
    class_names: tuple[str, ...]
    meta: dict = field(default_factory=dict)
    loss_history: tuple[float, ...] = field(default=(), compare=False)

    def _forward(self, X):
        W1, W2, W3 = self.weights
        b1, b2, b3 = self.biases
        z1 = X @ W1 + b1
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ W2 + b2
        h2 = np.maximum(z2, 0.0)
        p = _softmax(h2 @ W3 + b3)
        return z1, h1, z2, h2, p

    def predict_proba(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self._forward(X)[-1]

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def to_dict(self) -> dict:
        return {
            "kind": "mlp",
            "class_names": list(self.class_names),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSubstitute":
        return cls(
            tuple(np.asarray(w, dtype=float) for w in d["weights"]),
            tuple(np.asarray(b, dtype=float) for b in d["biases"]),
            tuple(d["class_names"]),
            dict(d.get("meta", {})),
        )


def train_mlp(train: LabeledDataset, params: MlpParams = MlpParams(), seed: int = 0) -> MlpSubstitute:
    """Mini-batch SGD on mean softmax cross-entropy."""
    _require_classes(train)
    rng = np.random.default_rng(seed)
    X, y = train.X, train.y
    n, C, H = len(train), len(train.class_names), params.hidden
    sizes = [(N_FEATURES, H), (H, H), (H, C)]
    Ws = [rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)) for a, b in sizes]
    bs = [np.zeros(b) for _, b in sizes]
    onehot = np.eye(C)[y]

    def full_loss():
        m = MlpSubstitute(tuple(Ws), tuple(bs), train.class_names)
        p = m.predict_proba(X)
        return float(-np.mean(np.log(np.clip(p[np.arange(n), y], 1e-300, None))))

    history = [full_loss()]
    for _ in range(params.epochs):
        order = rng.permutation(n)
        for start in range(0, n, params.batch_size):
            idx = order[start:start + params.batch_size]
            xb, tb = X[idx], onehot[idx]
            z1 = xb @ Ws[0] + bs[0]
            h1 = np.maximum(z1, 0.0)
            z2 = h1 @ Ws[1] + bs[1]
            h2 = np.maximum(z2, 0.0)
            p = _softmax(h2 @ Ws[2] + bs[2])
            g3 = (p - tb) / idx.size
            g2 = (g3 @ Ws[2].T) * (z2 > 0)
            g1 = (g2 @ Ws[1].T) * (z1 > 0)
            grads = [(xb.T @ g1, g1.sum(0)), (h1.T @ g2, g2.sum(0)), (h2.T @ g3, g3.sum(0))]
            for i, (gw, gb) in enumerate(grads):
                Ws[i] -= params.lr * gw
                bs[i] -= params.lr * gb
        history.append(full_loss())
    meta = {"seed": int(seed), "params": asdict(params)}
    return MlpSubstitute(tuple(Ws), tuple(bs), train.class_names, meta, tuple(history))


def mlp_gradient(m: MlpSubstitute, x, label) -> np.ndarray:
    """d(cross-entropy)/dx by backpropagation."""
    x = np.asarray(getattr(x, "values", x), dtype=float).reshape(1, -1)
    k = _label_index(m.class_names, label)
    z1, _, z2, _, p = m._forward(x)
    W1, W2, W3 = m.weights
    g = p[0].copy()
    g[k] -= 1.0
    g = (g @ W3.T) * (z2[0] > 0)
    g = (g @ W2.T) * (z1[0] > 0)
    return g @ W1.T


def mlp_jacobian(m: MlpSubstitute, x) -> np.ndarray:
    """d p_j / d x_i as a (C, 9) matrix."""
    x = np.asarray(getattr(x, "values", x), dtype=float).reshape(1, -1)
    z1, _, z2, _, p = m._forward(x)
    W1, W2, W3 = m.weights
    p = p[0]
    dsoft = np.diag(p) - np.outer(p, p)
    # logits wrt input: W3^T diag(relu'(z2)) W2^T diag(relu'(z1)) W1^T
    dz = (W3.T * (z2[0] > 0)) @ (W2.T * (z1[0] > 0)) @ W1.T
    return dsoft @ dz


@dataclass(frozen=True)
class SvmSubstitute:
    """One-vs-rest linear SVMs; predicted class is argmax_k w[k].x + b[k]."""

    W: np.ndarray
    b: np.ndarray
    class_names: tuple[str, ...]
    meta: dict = field(default_factory=dict)
    objective_history: tuple[float, ...] = field(default=(), compare=False)

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X @ self.W.T + self.b

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    def to_dict(self) -> dict:
        return {
            "kind": "svm",
            "class_names": list(self.class_names),
            "W": self.W.tolist(),
            "b": self.b.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SvmSubstitute":
        return cls(np.asarray(d["W"], dtype=float), np.asarray(d["b"], dtype=float), tuple(d["class_names"]), dict(d.get("meta", {})))


def hinge_objective(W, b, X, Y, reg) -> float:
    """Sum over classes of reg/2 |w|^2 + mean hinge, with Y in {-1, +1}."""
    margins = Y * (X @ W.T + b)
    return float(0.5 * reg * np.sum(W * W) + np.mean(np.maximum(0.0, 1.0 - margins), axis=0).sum())


def train_svm(train: LabeledDataset, params: SvmParams = SvmParams(), seed: int = 0) -> SvmSubstitute:
    """Full-batch subgradient descent with step lr/sqrt(1+t) on the L2-regularized hinge loss."""
    _require_classes(train)
    rng = np.random.default_rng(seed)
    X = train.X
    n, C = len(train), len(train.class_names)
    Y = np.where(np.eye(C, dtype=bool)[train.y], 1.0, -1.0)  # (n, C)
    W = rng.normal(0.0, 0.01, size=(C, N_FEATURES))
    b = np.zeros(C)
    history = [hinge_objective(W, b, X, Y, params.reg)]
    for t in range(params.epochs):
        active = (Y * (X @ W.T + b)) < 1.0  # (n, C)
        coef = np.where(active, -Y, 0.0) / n
        gW = params.reg * W + coef.T @ X
        gb = coef.sum(axis=0)
        step = params.lr / np.sqrt(1.0 + t)
        W = W - step * gW
        b = b - step * gb
        history.append(hinge_objective(W, b, X, Y, params.reg))
    present = np.unique(train.y)
    if np.any(np.linalg.norm(W[present], axis=1) == 0):
        raise TrainingError("a trained class ended with a zero weight vector")
    meta = {"seed": int(seed), "params": asdict(params)}
    return SvmSubstitute(W, b, train.class_names, meta, tuple(history))


def train_dt(train: LabeledDataset, params: ForestParams = ForestParams(feature_subsample=9), seed: int = 0) -> DecisionTree:
    """Decision-tree surrogate (the defender's CART trainer on surrogate data)."""
    _require_classes(train)
    return train_tree(train, params, seed)


def encode_substitute(model) -> bytes:
    if isinstance(model, DecisionTree):
        return canonical.dump_bytes({"kind": "dt", "tree": model.to_dict()})
    return canonical.dump_bytes(model.to_dict())


def decode_substitute(data: bytes):
    d = canonical.loads(data)
    kind = d["kind"]
    if kind == "mlp":
        return MlpSubstitute.from_dict(d)
    if kind == "svm":
        return SvmSubstitute.from_dict(d)
    if kind == "dt":
        return DecisionTree.from_dict(d["tree"])
    raise ValueError(f"unknown substitute kind {kind!r}")
