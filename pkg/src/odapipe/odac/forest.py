"""Bagged regression trees predicting near-future maximum component temperature.

Implemented from scratch so that split selection (variance-reduction argmax
over candidate thresholds), stopping rules and the model file format are
fully pinned down: the same seed and data always produce a byte-identical
model file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .base import ParamsMixin, check_matrix, check_vector, format_float

FORMAT_NAME = "odapipe-forest"
FORMAT_VERSION = 1


@dataclass
class Tree:
    """Flat preorder node arrays; feature -1 marks a leaf."""

    feature: np.ndarray     # int64
    threshold: np.ndarray   # float64
    left: np.ndarray        # int64, -1 for leaves
    right: np.ndarray      # int64, -1 for leaves
    value: np.ndarray       # float64 node mean

    def predict(self, X: np.ndarray) -> np.ndarray:
        idx = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            feat = self.feature[idx]
            leaf = feat < 0
            if leaf.all():
                return self.value[idx]
            safe_feat = np.where(leaf, 0, feat)
            go_left = X[rows, safe_feat] <= self.threshold[idx]
            nxt = np.where(go_left, self.left[idx], self.right[idx])
            idx = np.where(leaf, idx, nxt)


def best_split(x: np.ndarray, y: np.ndarray) -> tuple[float, float] | None:
    """Best threshold on one feature by variance reduction (weighted SSE drop).

    Candidate thresholds are midpoints between distinct consecutive sorted
    values. Returns (gain, threshold) or None when the feature is constant.
    """
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = len(ys)
    cuts = np.flatnonzero(xs[1:] > xs[:-1]) + 1
    if len(cuts) == 0:
        return None
    csum = np.cumsum(ys)
    csq = np.cumsum(ys * ys)
    total_sum, total_sq = csum[-1], csq[-1]
    parent_sse = total_sq - total_sum * total_sum / n
    left_n = cuts
    left_sum = csum[cuts - 1]
    left_sq = csq[cuts - 1]
    right_n = n - left_n
    right_sum = total_sum - left_sum
    right_sq = total_sq - left_sq
    sse = (left_sq - left_sum * left_sum / left_n
           + right_sq - right_sum * right_sum / right_n)
    best = int(np.argmin(sse))
    gain = parent_sse - float(sse[best])
    pos = cuts[best]
    threshold = (xs[pos - 1] + xs[pos]) / 2.0
    return gain, float(threshold)


class TemperatureForest(ParamsMixin):
    """Random-forest regressor: fit/predict with deterministic training.

    Stopping rules: nodes at ``max_depth`` or holding at most ``min_leaf``
    samples become leaves. Each split considers ceil(sqrt(n_features))
    random feature candidates unless ``n_candidates`` overrides it.
    """

    def __init__(self, n_trees: int = 50, max_depth: int = 12, min_leaf: int = 5,
                 n_candidates: int | None = None, seed: int = 0,
                 horizon: int = 6, min_samples: int = 50):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.n_candidates = n_candidates
        self.seed = seed
        self.horizon = horizon
        self.min_samples = min_samples
        self.trees_: list[Tree] | None = None
        self.n_features_: int = 0

    # ------------------------------------------------------------------ fit --

    def fit(self, X, y) -> "TemperatureForest":
        X = check_matrix(X, "X")
        y = check_vector(y, len(X), "y")
        n, d = X.shape
        if n < self.min_samples:
            raise ValueError(f"too few samples: {n} < {self.min_samples}")
        k = self.n_candidates or math.ceil(math.sqrt(d))
        k = min(k, d)
        rng = np.random.default_rng(self.seed)
        trees = []
        for _ in range(self.n_trees):
            boot = rng.integers(0, n, size=n)
            trees.append(self._build_tree(X[boot], y[boot], k, rng))
        self.trees_ = trees
        self.n_features_ = d
        return self

    def _build_tree(self, X: np.ndarray, y: np.ndarray, k: int,
                    rng: np.random.Generator) -> Tree:
        feature, threshold, left, right, value = [], [], [], [], []

        def grow(idx: np.ndarray, depth: int) -> int:
            node = len(feature)
            ys = y[idx]
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(float(ys.mean()))
            if depth >= self.max_depth or len(idx) <= self.min_leaf or (ys == ys[0]).all():
                return node
            cand = rng.choice(X.shape[1], size=k, replace=False)
            best_gain, best_feat, best_thr = 0.0, -1, 0.0
            for f in cand:
                got = best_split(X[idx, f], ys)
                if got is not None and got[0] > best_gain:
                    best_gain, best_feat, best_thr = got[0], int(f), got[1]
            if best_feat < 0:
                return node
            mask = X[idx, best_feat] <= best_thr
            feature[node] = best_feat
            threshold[node] = best_thr
            left[node] = grow(idx[mask], depth + 1)
            right[node] = grow(idx[~mask], depth + 1)
            return node

        grow(np.arange(len(X)), 0)
        return Tree(feature=np.array(feature, dtype=np.int64),
                    threshold=np.array(threshold),
                    left=np.array(left, dtype=np.int64),
                    right=np.array(right, dtype=np.int64),
                    value=np.array(value))

    # -------------------------------------------------------------- predict --

    def predict(self, X) -> np.ndarray:
        """Mean over trees; (n, F) -> (n,) float."""
        self._check_fitted("trees_")
        X = check_matrix(X, "X")
        if X.shape[1] != self.n_features_:
            raise ValueError(f"X has {X.shape[1]} features, model has {self.n_features_}")
        out = np.zeros(len(X))
        for tree in self.trees_:
            out += tree.predict(X)
        return out / len(self.trees_)

    def predict_one(self, x) -> float:
        return float(self.predict(np.asarray(x, dtype=np.float64).reshape(1, -1))[0])

    def predict_milli(self, x) -> int:
        """Integer milli-degree prediction, rounded half-up."""
        return math.floor(self.predict_one(x) + 0.5)

    # ------------------------------------------------------------------- io --

    def save(self, path: str) -> None:
        """Header plus per-tree preorder node list:
        ``node <feature> <threshold> <left> <right> <value>``."""
        self._check_fitted("trees_")
        lines = [f"{FORMAT_NAME} {FORMAT_VERSION}",
                 f"trees {len(self.trees_)}",
                 f"features {self.n_features_}",
                 f"seed {self.seed}",
                 f"horizon {self.horizon}"]
        for t_i, tree in enumerate(self.trees_):
            lines.append(f"tree {t_i} nodes {len(tree.feature)}")
            for i in range(len(tree.feature)):
                lines.append(f"node {tree.feature[i]} {format_float(tree.threshold[i])} "
                             f"{tree.left[i]} {tree.right[i]} {format_float(tree.value[i])}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str) -> "TemperatureForest":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
        head = lines[0].split()
        if head[0] != FORMAT_NAME or int(head[1]) != FORMAT_VERSION:
            raise ValueError(f"{path}: not a {FORMAT_NAME} v{FORMAT_VERSION} file")
        n_trees = int(lines[1].split()[1])
        n_features = int(lines[2].split()[1])
        seed = int(lines[3].split()[1])
        horizon = int(lines[4].split()[1])
        model = cls(n_trees=n_trees, seed=seed, horizon=horizon)
        model.n_features_ = n_features
        trees = []
        pos = 5
        for _ in range(n_trees):
            parts = lines[pos].split()
            if parts[0] != "tree":
                raise ValueError(f"{path}: expected tree header, got {lines[pos]!r}")
            count = int(parts[3])
            pos += 1
            feature, threshold, left, right, value = [], [], [], [], []
            for ln in lines[pos:pos + count]:
                p = ln.split()
                if p[0] != "node" or len(p) != 6:
                    raise ValueError(f"{path}: bad node line {ln!r}")
                feature.append(int(p[1]))
                threshold.append(float(p[2]))
                left.append(int(p[3]))
                right.append(int(p[4]))
                value.append(float(p[5]))
            pos += count
            trees.append(Tree(feature=np.array(feature, dtype=np.int64),
                              threshold=np.array(threshold),
                              left=np.array(left, dtype=np.int64),
                              right=np.array(right, dtype=np.int64),
                              value=np.array(value)))
        model.trees_ = trees
        return model
