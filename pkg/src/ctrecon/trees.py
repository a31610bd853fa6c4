"""Regression-tree ensembles: random forest and gradient boosting.

Built from scratch so training is bit-deterministic: per-tree random
streams derive from (seed, tree index), split ties break toward the lowest
feature index then the lowest threshold, and children are grown
left-then-right. The boosting variant uses second-order gains with an l2
penalty and supports depth-wise growth (bounded depth) or leaf-wise growth
(bounded leaf count).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

__all__ = [
    "RandomForestParams",
    "GbmParams",
    "TreeNode",
    "TreeEnsemble",
    "train_random_forest",
    "train_gbm",
]


@dataclass(frozen=True)
class RandomForestParams:
    n_trees: int = 500
    mtry: int | None = None  # None -> max(1, n_features // 3)
    min_node_size: int = 5
    bootstrap: bool = True  # test hook: off reproduces plain bagged-free CART

    def resolved_mtry(self, n_features: int) -> int:
        if self.mtry is not None:
            return max(1, min(self.mtry, n_features))
        return max(1, n_features // 3)


@dataclass(frozen=True)
class GbmParams:
    n_rounds: int = 100
    learning_rate: float = 0.3
    growth: str = "depth"  # "depth" | "leaf"
    max_depth: int | None = 6
    num_leaves: int | None = None
    row_subsample: float = 1.0
    col_subsample: float = 1.0
    min_child_weight: float = 1.0
    l2: float = 1.0
    l1: float = 0.0
    min_split_gain: float = 0.0

    @classmethod
    def depthwise_defaults(cls) -> "GbmParams":
        return cls()

    @classmethod
    def leafwise_defaults(cls) -> "GbmParams":
        return cls(
            growth="leaf",
            max_depth=None,
            num_leaves=31,
            learning_rate=0.1,
            min_child_weight=0.001,
            l2=0.0,
            l1=0.0,
        )

    def __post_init__(self):
        if self.growth not in ("depth", "leaf"):
            raise ValueError(f"unknown growth policy {self.growth!r}")
        if self.growth == "leaf" and self.num_leaves is None:
            raise ValueError("leaf-wise growth needs num_leaves")
        if not 0 < self.row_subsample <= 1 or not 0 < self.col_subsample <= 1:
            raise ValueError("subsample ratios must be in (0, 1]")


@dataclass
class TreeNode:
    feature: int = -1
    threshold: float = np.inf
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def n_leaves(self) -> int:
        if self.is_leaf:
            return 1
        return self.left.n_leaves() + self.right.n_leaves()


def _predict_tree(root: TreeNode, X: np.ndarray) -> np.ndarray:
    out = np.empty(len(X))
    stack = [(root, np.arange(len(X)))]
    while stack:
        node, rows = stack.pop()
        if node.is_leaf:
            out[rows] = node.value
            continue
        go_left = X[rows, node.feature] < node.threshold
        stack.append((node.left, rows[go_left]))
        stack.append((node.right, rows[~go_left]))
    return out


@dataclass
class TreeEnsemble:
    """A trained forest or boosted stage list with its provenance."""

    family: str  # "random-forest" | "gbm"
    trees: list[TreeNode]
    params: RandomForestParams | GbmParams
    seed: int
    feature_names: tuple[str, ...]
    base_score: float = 0.0

    def tree_predictions(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if not self.trees:
            return np.zeros((0, len(X)))
        return np.vstack([_predict_tree(t, X) for t in self.trees])

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise ValueError(
                f"expected (rows x {len(self.feature_names)}) features, got {X.shape}"
            )
        preds = self.tree_predictions(X)
        if self.family == "random-forest":
            if preds.size == 0:
                raise ValueError("empty forest")
            return preds.mean(axis=0)
        total = np.full(len(X), self.base_score)
        if preds.size:
            total = total + self.params.learning_rate * preds.sum(axis=0)
        return total


# ---------------------------------------------------------------------------
# squared-error CART splits (random forest)


def _best_sse_split(X, y, rows, features):
    """Lowest-SSE split over the candidate features; None when nothing helps.

    Features are scanned in ascending index order and comparisons are
    strict, so ties resolve to the lowest feature then lowest threshold.
    """
    yr = y[rows]
    n = len(rows)
    total1 = yr.sum()
    total2 = float(yr @ yr)
    parent_sse = total2 - total1 * total1 / n
    best = None  # (sse, feature, threshold)
    for f in features:
        v = X[rows, f]
        order = np.argsort(v, kind="stable")
        sv = v[order]
        sy = yr[order]
        boundaries = np.nonzero(sv[1:] > sv[:-1])[0] + 1
        if len(boundaries) == 0:
            continue
        c1 = np.cumsum(sy)
        c2 = np.cumsum(sy * sy)
        nl = boundaries.astype(float)
        l1 = c1[boundaries - 1]
        l2 = c2[boundaries - 1]
        nr = n - nl
        sse = (l2 - l1 * l1 / nl) + ((total2 - l2) - (total1 - l1) ** 2 / nr)
        i = int(np.argmin(sse))
        if sse[i] < parent_sse - 1e-12 and (best is None or sse[i] < best[0]):
            b = boundaries[i]
            threshold = float((sv[b - 1] + sv[b]) / 2.0)
            best = (float(sse[i]), f, threshold)
    return best


def _grow_cart(X, y, rows, rng, mtry, nodesize, n_features):
    node = TreeNode(value=float(y[rows].mean()))
    if len(rows) <= nodesize:
        return node
    feats = np.sort(rng.choice(n_features, size=min(mtry, n_features), replace=False))
    found = _best_sse_split(X, y, rows, feats)
    if found is None:
        return node
    _, f, threshold = found
    go_left = X[rows, f] < threshold
    node.feature = f
    node.threshold = threshold
    node.left = _grow_cart(X, y, rows[go_left], rng, mtry, nodesize, n_features)
    node.right = _grow_cart(X, y, rows[~go_left], rng, mtry, nodesize, n_features)
    return node


def train_random_forest(
    X: np.ndarray,
    y: np.ndarray,
    params: RandomForestParams | None = None,
    seed: int = 0,
    feature_names: Sequence[str] | None = None,
) -> TreeEnsemble:
    """Bagged CART regression trees with per-split feature subsampling."""
    params = params or RandomForestParams()
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    if n < 1:
        raise ValueError("need at least one training row")
    names = tuple(feature_names) if feature_names is not None else tuple(
        f"x{i}" for i in range(d)
    )
    mtry = params.resolved_mtry(d)
    trees = []
    for t in range(params.n_trees):
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, t]))
        rows = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
        trees.append(_grow_cart(X, y, rows, rng, mtry, params.min_node_size, d))
    return TreeEnsemble(
        family="random-forest",
        trees=trees,
        params=params,
        seed=seed,
        feature_names=names,
    )


# ---------------------------------------------------------------------------
# second-order boosting splits


def _leaf_weight(G: float, H: float, l2: float, l1: float) -> float:
    if l1 > 0:
        G = np.sign(G) * max(abs(G) - l1, 0.0)
    return float(-G / (H + l2))


def _best_gain_split(X, g, h, rows, features, params: GbmParams):
    """Highest second-order gain split; None when no split clears the bar."""
    gr = g[rows]
    hr = h[rows]
    G = gr.sum()
    H = hr.sum()
    parent_score = G * G / (H + params.l2)
    best = None  # (gain, feature, threshold)
    for f in features:
        v = X[rows, f]
        order = np.argsort(v, kind="stable")
        sv = v[order]
        sg = gr[order]
        sh = hr[order]
        boundaries = np.nonzero(sv[1:] > sv[:-1])[0] + 1
        if len(boundaries) == 0:
            continue
        cg = np.cumsum(sg)
        ch = np.cumsum(sh)
        GL = cg[boundaries - 1]
        HL = ch[boundaries - 1]
        GR = G - GL
        HR = H - HL
        ok = (HL >= params.min_child_weight) & (HR >= params.min_child_weight)
        if not ok.any():
            continue
        gain = 0.5 * (
            GL**2 / (HL + params.l2) + GR**2 / (HR + params.l2) - parent_score
        ) - params.min_split_gain
        gain[~ok] = -np.inf
        i = int(np.argmax(gain))
        if gain[i] > 0 and (best is None or gain[i] > best[0]):
            b = boundaries[i]
            best = (float(gain[i]), f, float((sv[b - 1] + sv[b]) / 2.0))
    return best


def _grow_gbm_depthwise(X, g, h, rows, features, params, depth):
    gr, hr = g[rows], h[rows]
    node = TreeNode(value=_leaf_weight(gr.sum(), hr.sum(), params.l2, params.l1))
    if params.max_depth is not None and depth >= params.max_depth:
        return node
    found = _best_gain_split(X, g, h, rows, features, params)
    if found is None:
        return node
    _, f, threshold = found
    go_left = X[rows, f] < threshold
    node.feature = f
    node.threshold = threshold
    node.left = _grow_gbm_depthwise(X, g, h, rows[go_left], features, params, depth + 1)
    node.right = _grow_gbm_depthwise(X, g, h, rows[~go_left], features, params, depth + 1)
    return node


def _grow_gbm_leafwise(X, g, h, rows, features, params):
    root = TreeNode(value=_leaf_weight(g[rows].sum(), h[rows].sum(), params.l2, params.l1))
    counter = 0
    heap: list[tuple[float, int, TreeNode, np.ndarray, int]] = []

    def consider(node, node_rows, depth):
        nonlocal counter
        if params.max_depth is not None and depth >= params.max_depth:
            return
        found = _best_gain_split(X, g, h, node_rows, features, params)
        if found is not None:
            heapq.heappush(heap, (-found[0], counter, node, node_rows, depth))
            counter += 1

    consider(root, rows, 0)
    n_leaves = 1
    while heap and n_leaves < params.num_leaves:
        _, _, node, node_rows, depth = heapq.heappop(heap)
        found = _best_gain_split(X, g, h, node_rows, features, params)
        if found is None:
            continue
        _, f, threshold = found
        go_left = X[node_rows, f] < threshold
        left_rows, right_rows = node_rows[go_left], node_rows[~go_left]
        node.feature = f
        node.threshold = threshold
        node.left = TreeNode(
            value=_leaf_weight(g[left_rows].sum(), h[left_rows].sum(), params.l2, params.l1)
        )
        node.right = TreeNode(
            value=_leaf_weight(g[right_rows].sum(), h[right_rows].sum(), params.l2, params.l1)
        )
        n_leaves += 1
        consider(node.left, left_rows, depth + 1)
        consider(node.right, right_rows, depth + 1)
    return root


def train_gbm(
    X: np.ndarray,
    y: np.ndarray,
    params: GbmParams | None = None,
    seed: int = 0,
    feature_names: Sequence[str] | None = None,
) -> TreeEnsemble:
    """Gradient boosting with squared loss starting from the target mean."""
    params = params or GbmParams.depthwise_defaults()
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    if n < 2:
        raise ValueError("need at least two training rows")
    names = tuple(feature_names) if feature_names is not None else tuple(
        f"x{i}" for i in range(d)
    )
    base = float(y.mean())
    pred = np.full(n, base)
    h = np.ones(n)
    trees: list[TreeNode] = []
    for t in range(params.n_rounds):
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, t]))
        if params.col_subsample < 1:
            k = max(1, int(round(params.col_subsample * d)))
            features = np.sort(rng.choice(d, size=k, replace=False))
        else:
            features = np.arange(d)
        if params.row_subsample < 1:
            k = max(1, int(round(params.row_subsample * n)))
            rows = np.sort(rng.choice(n, size=k, replace=False))
        else:
            rows = np.arange(n)
        g = pred - y
        if params.growth == "depth":
            tree = _grow_gbm_depthwise(X, g, h, rows, features, params, depth=0)
        else:
            tree = _grow_gbm_leafwise(X, g, h, rows, features, params)
        trees.append(tree)
        pred = pred + params.learning_rate * _predict_tree(tree, X)
    return TreeEnsemble(
        family="gbm",
        trees=trees,
        params=params,
        seed=seed,
        feature_names=names,
        base_score=base,
    )
