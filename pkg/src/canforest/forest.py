"""CART trees, per-miner partial forests and their federated aggregation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from canforest import canonical
from canforest.errors import AggregationError, EmptyInputError, StratificationError
from canforest.features import N_FEATURES, LabeledDataset

LEAF = -1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 10
    bootstrap: bool = True
    max_depth: int = 12
    min_leaf: int = 2
    feature_subsample: int = 3


@dataclass(frozen=True)
class Prediction:
    label: str
    index: int
    probabilities: dict[str, float]


def gini(counts) -> float:
    c = np.asarray(counts, dtype=float)
    n = c.sum()
    if n == 0:
        return 0.0
    p = c / n
    return float(1.0 - np.sum(p * p))


@dataclass(frozen=True)
class DecisionTree:
    """Flat array tree; node 0 is the root, `x[f] <= threshold` goes left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # (n_nodes, n_classes) training counts reaching each node
    max_depth: int

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    @property
    def n_classes(self) -> int:
        return int(self.counts.shape[1])

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] == LEAF

    def leaf_class(self, node: int) -> int:
        return int(np.argmax(self.counts[node]))

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by every row of X."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] != LEAF
        while active.any():
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] != LEAF
        return node

    def leaf_distribution(self) -> np.ndarray:
        c = self.counts.astype(float)
        return c / np.maximum(c.sum(axis=1, keepdims=True), 1.0)

    def predict_proba(self, X) -> np.ndarray:
        return self.leaf_distribution()[self.apply(X)]

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def parents(self) -> np.ndarray:
        par = np.full(self.n_nodes, -1, dtype=np.int64)
        internal = np.flatnonzero(self.feature != LEAF)
        par[self.left[internal]] = internal
        par[self.right[internal]] = internal
        return par

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": [float(t) for t in self.threshold],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "counts": self.counts.tolist(),
            "max_depth": int(self.max_depth),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=float),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["counts"], dtype=np.int64).reshape(len(d["feature"]), -1),
            int(d["max_depth"]),
        )


def best_split(X: np.ndarray, y: np.ndarray, n_classes: int, features: Sequence[int], min_leaf: int):
    """Lowest weighted child Gini over midpoint thresholds of `features`.

    Returns (weighted_impurity, feature, threshold) or None when no split leaves
    `min_leaf` rows on both sides. Ties go to the lower feature, then threshold.
    """
    n = y.size
    best = None
    onehot = np.eye(n_classes, dtype=float)[y]
    total = onehot.sum(axis=0)
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        left = np.cumsum(onehot[order], axis=0)[:-1]
        n_left = np.arange(1, n, dtype=float)
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        right = total - left
        n_right = n - n_left
        g_left = 1.0 - np.sum(left * left, axis=1) / (n_left * n_left)
        g_right = 1.0 - np.sum(right * right, axis=1) / (n_right * n_right)
        weighted = (n_left * g_left + n_right * g_right) / n
        weighted = np.where(valid, weighted, np.inf)
        i = int(np.argmin(weighted))
        thr = 0.5 * (xs[i] + xs[i + 1])
        if not xs[i] <= thr < xs[i + 1]:
            thr = xs[i]
        cand = (float(weighted[i]), int(f), float(thr))
        if best is None or cand < best:
            best = cand
    return best


def train_tree(shard: LabeledDataset, params: ForestParams = ForestParams(), seed: int = 0) -> DecisionTree:
    """Greedy Gini CART over a random feature subset at every node."""
    if len(shard) == 0:
        raise EmptyInputError("cannot train a tree on an empty shard")
    X, y = shard.X, shard.y
    C = len(shard.class_names)
    rng = np.random.default_rng(seed)
    feature, threshold, left, right, counts = [], [], [], [], []
    depth_used = 0

    def new_node(idx):
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        counts.append(np.bincount(y[idx], minlength=C))
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        depth_used = max(depth_used, depth)
        if depth >= params.max_depth or np.count_nonzero(counts[node]) <= 1 or idx.size < 2 * params.min_leaf:
            continue
        Xn = X[idx]
        # draw features in random order until enough non-constant ones are seen
        chosen = []
        for f in rng.permutation(N_FEATURES):
            if Xn[:, f].max() > Xn[:, f].min():
                chosen.append(int(f))
                if len(chosen) >= params.feature_subsample:
                    break
        split = best_split(Xn, y[idx], C, chosen, params.min_leaf) if chosen else None
        if split is None:
            continue
        _, f, thr = split
        mask = Xn[:, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return DecisionTree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=float),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.vstack(counts).astype(np.int64),
        depth_used,
    )


def _check_rows(X) -> np.ndarray:
    X = np.asarray(getattr(X, "values", X), dtype=float)
    return X.reshape(-1, N_FEATURES)


class _Voting:
    """Soft voting: mean of per-tree leaf class-frequency distributions."""

    class_names: tuple[str, ...]

    @property
    def trees(self) -> list[DecisionTree]:
        raise NotImplementedError

    def predict_proba(self, X) -> np.ndarray:
        X = _check_rows(X)
        acc = np.zeros((X.shape[0], len(self.class_names)))
        for tree in self.trees:
            acc += tree.predict_proba(X)
        return acc / len(self.trees)

    def predict(self, X) -> np.ndarray:
        # argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.predict_proba(X), axis=1)


@dataclass(frozen=True)
class PartialForest(_Voting):
    forest_trees: tuple[DecisionTree, ...]
    miner_id: str
    class_names: tuple[str, ...]
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.forest_trees:
            raise EmptyInputError("a partial forest needs at least one tree")

    @property
    def trees(self) -> list[DecisionTree]:
        return list(self.forest_trees)

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "miner_id": self.miner_id,
            "train_meta": self.train_meta,
            "trees": [t.to_dict() for t in self.forest_trees],
        }

    def encode(self) -> bytes:
        return canonical.dump_bytes(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "PartialForest":
        return cls(
            tuple(DecisionTree.from_dict(t) for t in d["trees"]),
            str(d["miner_id"]),
            tuple(d["class_names"]),
            dict(d.get("train_meta", {})),
        )

    @classmethod
    def decode(cls, data: bytes) -> "PartialForest":
        return cls.from_dict(canonical.loads(data))


@dataclass(frozen=True)
class FederatedForest(_Voting):
    partials: tuple[PartialForest, ...]
    class_names: tuple[str, ...]

    @property
    def trees(self) -> list[DecisionTree]:
        return [t for p in self.partials for t in p.forest_trees]


def train_partial(
    shard: LabeledDataset, params: ForestParams = ForestParams(), seed: int = 0, miner_id: str = "miner-0"
) -> PartialForest:
    if len(shard) == 0:
        raise EmptyInputError("cannot train on an empty shard")
    rng = np.random.default_rng(seed)
    n = len(shard)
    trees = []
    for _ in range(params.n_trees):
        tree_seed = int(rng.integers(2**63 - 1))
        sample = shard.subset(rng.integers(0, n, size=n)) if params.bootstrap else shard
        trees.append(train_tree(sample, params, tree_seed))
    meta = {"shard_size": n, "seed": int(seed), "params": asdict(params)}
    return PartialForest(tuple(trees), miner_id, shard.class_names, meta)


def aggregate(partials: Sequence[PartialForest]) -> FederatedForest:
    """Union of all partial trees. Partials are put in canonical order first so
    that the vote (a float sum) does not depend on the order they arrived in."""
    if not partials:
        raise AggregationError("nothing to aggregate")
    names = partials[0].class_names
    for p in partials:
        if p.class_names != names:
            raise AggregationError(f"class set mismatch: {p.class_names} vs {names}")
    ordered = sorted(partials, key=lambda p: (p.miner_id, canonical.sha256(p.encode())))
    return FederatedForest(tuple(ordered), names)


def predict(model: _Voting, x) -> Prediction:
    proba = model.predict_proba(x)[0]
    i = int(np.argmax(proba))
    return Prediction(model.class_names[i], i, {c: float(p) for c, p in zip(model.class_names, proba)})


def shard(dataset: LabeledDataset, k: int, seed: int = 0) -> list[LabeledDataset]:
    """Stratified disjoint partition into `k` shards (k=1 returns the dataset)."""
    if k < 1:
        raise StratificationError("k must be >= 1")
    if k == 1:
        return [dataset]
    class_counts = np.bincount(dataset.y, minlength=len(dataset.class_names))
    present = class_counts[class_counts > 0]
    if present.size == 0 or present.min() < k:
        raise StratificationError(f"some class has fewer than k={k} rows")
    rng = np.random.default_rng(seed)
    # deal class-grouped, shuffled rows round-robin; the deal continues across
    # classes so shard sizes also differ by at most one
    dealt = np.concatenate([rng.permutation(np.flatnonzero(dataset.y == c)) for c in range(len(class_counts))])
    owner = np.arange(dealt.size) % k
    return [dataset.subset(np.sort(dealt[owner == i])) for i in range(k)]


def train_federated(
    dataset: LabeledDataset, k: int, params: ForestParams = ForestParams(), seed: int = 0
) -> tuple[FederatedForest, list[PartialForest]]:
    shards = shard(dataset, k, canonical.derive_seed(seed, "shard"))
    partials = [
        train_partial(s, params, canonical.derive_seed(seed, "miner", i), miner_id=f"miner-{i:03d}")
        for i, s in enumerate(shards)
    ]
    return aggregate(partials), partials


def train_central(dataset: LabeledDataset, params: ForestParams = ForestParams(), seed: int = 0) -> FederatedForest:
    """Single partial on the pooled data, seeded like miner 0 of `train_federated`."""
    partial = train_partial(dataset, params, canonical.derive_seed(seed, "miner", 0), miner_id="miner-000")
    return aggregate([partial])


def phi_loss(fed: _Voting, central: _Voting, test: LabeledDataset, metric: str = "accuracy") -> float:
    """|rho_FL - rho_SUM| on `test` for the chosen metric."""
    from canforest.report import confusion, metrics

    if len(test) == 0:
        raise EmptyInputError("empty test set")
    a = getattr(metrics(confusion(fed, test)), metric)
    b = getattr(metrics(confusion(central, test)), metric)
    return abs(a - b)
