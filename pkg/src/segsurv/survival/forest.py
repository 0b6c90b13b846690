"""Random survival forest: bootstrapped trees split by the log-rank
statistic, Nelson-Aalen curves in the leaves, ensemble mortality as the
risk score.

Determinism contract: tree t draws every random choice from a generator
seeded by (seed, t), trees are built sequentially, and split ties keep
the first candidate encountered, so a fixed seed reproduces the forest
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import SurvivalDataset

__all__ = ["TreeNode", "RsfModel", "fit_rsf", "rsf_risk"]


@dataclass
class TreeNode:
    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    leaf_times: np.ndarray | None = None
    leaf_cumhaz: np.ndarray | None = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"times": np.asarray(self.leaf_times).tolist(),
                    "cumhaz": np.asarray(self.leaf_cumhaz).tolist()}
        return {"feature": self.feature, "threshold": self.threshold,
                "left": self.left.to_dict(), "right": self.right.to_dict()}

    @staticmethod
    def from_dict(d: dict) -> "TreeNode":
        if "feature" in d:
            return TreeNode(feature=int(d["feature"]),
                            threshold=float(d["threshold"]),
                            left=TreeNode.from_dict(d["left"]),
                            right=TreeNode.from_dict(d["right"]))
        return TreeNode(leaf_times=np.array(d["times"], dtype=np.float64),
                        leaf_cumhaz=np.array(d["cumhaz"], dtype=np.float64))


@dataclass
class RsfModel:
    trees: list[TreeNode]
    n_trees: int
    seed: int
    mtry: int
    min_leaf: int
    event_time_grid: np.ndarray
    feature_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "model": "rsf",
            "trees": [t.to_dict() for t in self.trees],
            "n_trees": self.n_trees,
            "seed": self.seed,
            "mtry": self.mtry,
            "min_leaf": self.min_leaf,
            "event_time_grid": np.asarray(self.event_time_grid).tolist(),
            "feature_names": list(self.feature_names),
        }

    @staticmethod
    def from_dict(d: dict) -> "RsfModel":
        return RsfModel(trees=[TreeNode.from_dict(t) for t in d["trees"]],
                        n_trees=int(d["n_trees"]), seed=int(d["seed"]),
                        mtry=int(d["mtry"]), min_leaf=int(d["min_leaf"]),
                        event_time_grid=np.array(d["event_time_grid"]),
                        feature_names=list(d["feature_names"]))


def _nelson_aalen_curve(time, event):
    """Unique event times with the cumulative hazard after each."""
    uniq = np.unique(time[event == 1])
    increments = np.empty(uniq.size)
    for k, t in enumerate(uniq):
        d = int(((time == t) & (event == 1)).sum())
        at_risk = int((time >= t).sum())
        increments[k] = d / at_risk
    return uniq, np.cumsum(increments)


def _log_rank_best_split(x, time, event, min_leaf):
    """Max |log-rank statistic| over midpoint splits of one feature.

    Left sets are prefixes of the sort order; at-risk and death counts
    for every prefix come from cumulative sums, so all candidate splits
    are scored in one pass. Returns (stat, threshold) or None.
    """
    n = x.size
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ts = time[order]
    es = event[order]

    sizes = np.arange(min_leaf, n - min_leaf + 1)
    sizes = sizes[xs[sizes - 1] < xs[np.minimum(sizes, n - 1)]]
    if sizes.size == 0:
        return None
    u = np.unique(ts[es == 1])
    if u.size == 0:
        return None

    B = (ts[:, None] >= u[None, :]).astype(np.float64)
    D = ((ts[:, None] == u[None, :]) & (es[:, None] == 1)).astype(np.float64)
    n_k = B.sum(axis=0)
    d_k = D.sum(axis=0)
    n1 = np.cumsum(B, axis=0)[sizes - 1]
    d1 = np.cumsum(D, axis=0)[sizes - 1]

    frac = n1 / n_k
    oe = (d1 - d_k * frac).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        var_k = np.where(n_k > 1,
                         d_k * frac * (1.0 - frac) * (n_k - d_k) / (n_k - 1.0),
                         0.0)
    v = var_k.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        stat = np.where(v > 0, np.abs(oe) / np.sqrt(v), -np.inf)
    best = int(np.argmax(stat))
    if not np.isfinite(stat[best]):
        return None
    m = sizes[best]
    return float(stat[best]), 0.5 * (xs[m - 1] + xs[m])


def _build_tree(X, time, event, rng, mtry, min_leaf):
    n, p = X.shape
    if n < 2 * min_leaf or event.sum() == 0:
        t, h = _nelson_aalen_curve(time, event)
        return TreeNode(leaf_times=t, leaf_cumhaz=h)
    feats = rng.choice(p, size=min(mtry, p), replace=False)
    best = None
    for f in feats:
        cand = _log_rank_best_split(X[:, f], time, event, min_leaf)
        if cand is not None and (best is None or cand[0] > best[0]):
            best = (cand[0], int(f), cand[1])
    if best is None:
        t, h = _nelson_aalen_curve(time, event)
        return TreeNode(leaf_times=t, leaf_cumhaz=h)
    _, f, thr = best
    go_left = X[:, f] <= thr
    return TreeNode(
        feature=f, threshold=thr,
        left=_build_tree(X[go_left], time[go_left], event[go_left],
                         rng, mtry, min_leaf),
        right=_build_tree(X[~go_left], time[~go_left], event[~go_left],
                          rng, mtry, min_leaf))


def fit_rsf(data: SurvivalDataset, n_trees: int = 100, mtry: int | None = None,
            min_leaf: int = 3, seed: int = 0) -> RsfModel:
    if min_leaf < 1:
        raise ValueError("min_leaf must be >= 1")
    if data.n < 2 * min_leaf:
        raise ValueError(f"need at least {2 * min_leaf} samples, got {data.n}")
    if data.n_events == 0:
        raise ValueError("no events: cannot grow survival trees")
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    if mtry is None:
        mtry = max(1, round(data.p ** 0.5))

    trees = []
    for t in range(n_trees):
        rng = np.random.default_rng((seed, t))
        boot = rng.integers(0, data.n, size=data.n)
        trees.append(_build_tree(data.X[boot], data.time[boot],
                                 data.event[boot], rng, mtry, min_leaf))
    grid = np.unique(data.time[data.event == 1])
    return RsfModel(trees=trees, n_trees=n_trees, seed=seed, mtry=mtry,
                    min_leaf=min_leaf, event_time_grid=grid,
                    feature_names=list(data.feature_names))


def _leaf_grid_sum(node: TreeNode, grid, cache) -> float:
    key = id(node)
    if key not in cache:
        if node.leaf_times.size == 0:
            cache[key] = 0.0
        else:
            idx = np.searchsorted(node.leaf_times, grid, side="right")
            h = np.where(idx > 0, node.leaf_cumhaz[np.maximum(idx - 1, 0)], 0.0)
            cache[key] = float(h.sum())
    return cache[key]


def _predict_tree(node: TreeNode, X, rows, out, grid, cache):
    if node.is_leaf:
        out[rows] = _leaf_grid_sum(node, grid, cache)
        return
    go_left = X[rows, node.feature] <= node.threshold
    _predict_tree(node.left, X, rows[go_left], out, grid, cache)
    _predict_tree(node.right, X, rows[~go_left], out, grid, cache)


def rsf_risk(model: RsfModel, X_new) -> np.ndarray:
    """Ensemble mortality: the tree-averaged leaf cumulative hazard summed
    over the training event-time grid."""
    X_new = np.asarray(X_new, dtype=np.float64)
    if X_new.ndim != 2 or X_new.shape[1] != len(model.feature_names):
        raise ValueError(f"expected {len(model.feature_names)} features, "
                         f"got shape {X_new.shape}")
    risk = np.zeros(X_new.shape[0])
    rows = np.arange(X_new.shape[0])
    cache: dict = {}
    for tree in model.trees:
        out = np.empty(X_new.shape[0])
        _predict_tree(tree, X_new, rows, out, model.event_time_grid, cache)
        risk += out
    return risk / len(model.trees)
