"""
Binary random forest built from CART trees with Gini impurity.

Training is deterministic: the dataset is sorted into a canonical order
first, every tree draws its bootstrap sample and feature subsets from its own
generator seeded by ``(seed, tree_index)``, and split ties go to the lower
feature index, then the lower threshold.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ForestFormatError, InvalidArgumentError, TrainingError

FOREST_VERSION = 1
_GAIN_EPS = 1e-12


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 8
    min_leaf: int = 2
    features_per_split: int = 3
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 0 or self.min_leaf < 1 or self.features_per_split < 1:
            raise InvalidArgumentError(f"invalid forest config {self}")


def gini(n_pos: float, n: float) -> float:
    if n == 0:
        return 0.0
    p = n_pos / n
    return 2.0 * p * (1.0 - p)


@dataclass
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)
    n_samples: list[int] = field(default_factory=list)
    impurity: list[float] = field(default_factory=list)

    def _add(self, value: float, n: int, impurity: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        self.n_samples.append(int(n))
        self.impurity.append(float(impurity))
        return len(self.feature) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        value = np.asarray(self.value)
        node = np.zeros(len(X), dtype=int)
        rows = np.arange(len(X))
        while True:
            f = feature[node]
            active = f >= 0
            if not active.any():
                break
            go_left = X[rows[active], f[active]] <= threshold[node[active]]
            node[active] = np.where(go_left, left[node[active]], right[node[active]])
        return value[node]

    def paths(self):
        """Yield every root-to-leaf path as a list of node indices."""
        stack = [[0]]
        while stack:
            path = stack.pop()
            i = path[-1]
            if self.feature[i] < 0:
                yield path
            else:
                stack.append(path + [self.right[i]])
                stack.append(path + [self.left[i]])

    def to_dict(self) -> dict:
        nodes = []
        for i in range(self.n_nodes):
            node = {"n": self.n_samples[i], "gini": self.impurity[i]}
            if self.feature[i] < 0:
                node["value"] = self.value[i]
            else:
                node.update(feature=self.feature[i], threshold=self.threshold[i], left=self.left[i], right=self.right[i])
            nodes.append(node)
        return {"nodes": nodes}

    @classmethod
    def from_dict(cls, d: dict, n_features: int) -> Tree:
        if not isinstance(d, dict) or not isinstance(d.get("nodes"), list) or not d["nodes"]:
            raise ForestFormatError("tree must be an object with a non-empty 'nodes' list")
        t = cls()
        nodes = d["nodes"]
        for i, node in enumerate(nodes):
            try:
                if "value" in node:
                    v = float(node["value"])
                    if not 0.0 <= v <= 1.0:
                        raise ForestFormatError(f"node {i}: leaf value {v} outside [0, 1]")
                    t._add(v, int(node.get("n", 0)), float(node.get("gini", 0.0)))
                else:
                    f, l, r = int(node["feature"]), int(node["left"]), int(node["right"])
                    if not 0 <= f < n_features:
                        raise ForestFormatError(f"node {i}: feature index {f} out of range")
                    if not (0 < l < len(nodes) and 0 < r < len(nodes)):
                        raise ForestFormatError(f"node {i}: child index out of range")
                    idx = t._add(0.0, int(node.get("n", 0)), float(node.get("gini", 0.0)))
                    t.feature[idx] = f
                    t.threshold[idx] = float(node["threshold"])
                    t.left[idx] = l
                    t.right[idx] = r
            except (KeyError, TypeError, ValueError) as exc:
                raise ForestFormatError(f"node {i}: {exc}") from exc
        return t


def _best_split(X: np.ndarray, y: np.ndarray, features: np.ndarray, min_leaf: int):
    n = len(y)
    n_pos = y.sum()
    parent = gini(n_pos, n)
    best = (_GAIN_EPS, None, None)
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = y[order]
        left_n = np.arange(1, n)
        left_pos = np.cumsum(ys)[:-1]
        valid = (xs[1:] > xs[:-1]) & (left_n >= min_leaf) & (n - left_n >= min_leaf)
        if not valid.any():
            continue
        ln = left_n[valid].astype(float)
        lp = left_pos[valid].astype(float)
        rn = n - ln
        rp = n_pos - lp
        pl = lp / ln
        pr = rp / rn
        weighted = (ln * 2 * pl * (1 - pl) + rn * 2 * pr * (1 - pr)) / n
        gains = parent - weighted
        k = int(np.argmax(gains))  # first maximum is the lowest threshold
        if gains[k] > best[0] + _GAIN_EPS:
            pos = np.flatnonzero(valid)[k]
            best = (float(gains[k]), int(f), float((xs[pos] + xs[pos + 1]) / 2.0))
    return best


def build_tree(X: np.ndarray, y: np.ndarray, config: ForestConfig, rng: np.random.Generator) -> Tree:
    tree = Tree()
    n_features = X.shape[1]
    k = min(config.features_per_split, n_features)

    def grow(rows: np.ndarray, depth: int) -> int:
        ys = y[rows]
        n = len(rows)
        pos = int(ys.sum())
        node = tree._add(pos / n, n, gini(pos, n))
        if depth >= config.max_depth or pos == 0 or pos == n or n < 2 * config.min_leaf:
            return node
        features = np.sort(rng.choice(n_features, size=k, replace=False))
        gain, f, thr = _best_split(X[rows], ys, features, config.min_leaf)
        if f is None:
            return node
        go_left = X[rows, f] <= thr
        tree.feature[node] = f
        tree.threshold[node] = thr
        left = grow(rows[go_left], depth + 1)
        right = grow(rows[~go_left], depth + 1)
        tree.left[node] = left
        tree.right[node] = right
        return node

    grow(np.arange(len(y)), 0)
    return tree


def canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    keys = np.column_stack([X, y]).T[::-1]
    return np.lexsort(keys)


@dataclass
class RandomForest:
    trees: list[Tree]
    config: ForestConfig
    n_features: int

    def predict_proba(self, X) -> np.ndarray | float:
        """Mean leaf positive-fraction over trees; accepts one vector or a matrix."""
        if not self.trees:
            raise InvalidArgumentError("forest has no trees")
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = X.reshape(1, -1) if single else X
        if X2.shape[1] != self.n_features:
            raise InvalidArgumentError(f"expected {self.n_features} features, got {X2.shape[1]}")
        total = np.zeros(len(X2))
        for tree in self.trees:
            total += tree.predict(X2)
        out = total / len(self.trees)
        return float(out[0]) if single else out

    def to_dict(self) -> dict:
        return {
            "version": FOREST_VERSION,
            "n_features": self.n_features,
            "config": asdict(self.config),
            "trees": [t.to_dict() for t in self.trees],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> RandomForest:
        if not isinstance(d, dict):
            raise ForestFormatError("forest JSON must be an object")
        if "version" not in d:
            raise ForestFormatError("missing 'version'")
        if d["version"] != FOREST_VERSION:
            raise ForestFormatError(f"unsupported forest version {d['version']!r} (expected {FOREST_VERSION})")
        if "trees" not in d:
            raise ForestFormatError("missing 'trees'")
        if not isinstance(d["trees"], list) or not d["trees"]:
            raise ForestFormatError("'trees' must be a non-empty list")
        try:
            config = ForestConfig(**d.get("config", {}))
        except (TypeError, ValueError) as exc:
            raise ForestFormatError(f"invalid 'config': {exc}") from exc
        n_features = d.get("n_features", 9)
        if not isinstance(n_features, int) or n_features < 1:
            raise ForestFormatError(f"invalid 'n_features': {n_features!r}")
        trees = [Tree.from_dict(t, n_features) for t in d["trees"]]
        return cls(trees, config, n_features)


def train_forest(X, y, config: ForestConfig | None = None, jobs: int = 1) -> RandomForest:
    config = config or ForestConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(int)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise TrainingError(f"expected X of shape (n, d) matching y, got {X.shape} and {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise TrainingError("labels must be 0 or 1")
    if len(np.unique(y)) < 2:
        raise TrainingError("training data must contain both classes")
    if not np.all(np.isfinite(X)):
        raise TrainingError("features must be finite")

    order = canonical_order(X, y)
    X = X[order]
    y = y[order]
    n = len(y)

    def one_tree(i: int) -> Tree:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, i]))
        rows = rng.integers(0, n, size=n) if config.bootstrap else np.arange(n)
        return build_tree(X[rows], y[rows], config, rng)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trees = list(pool.map(one_tree, range(config.n_trees)))
    else:
        trees = [one_tree(i) for i in range(config.n_trees)]
    return RandomForest(trees, config, X.shape[1])


def save_forest(forest: RandomForest, path) -> None:
    Path(path).write_text(forest.dumps())


def load_forest(path) -> RandomForest:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ForestFormatError(f"not valid JSON: {exc}") from exc
    return RandomForest.from_dict(d)
