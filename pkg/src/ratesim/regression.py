"""From-scratch CART regression trees and random-forest ensembles.

Trees split greedily on total variance reduction with candidate thresholds at
midpoints between consecutive sorted unique feature values. Forests train each
tree on a bootstrap resample with per-split random feature subsets and predict
the mean over trees. The hot loops are numba-compiled; model objects stay plain
numpy arrays so serialization and inspection are straightforward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .errors import DataError, ModelError, ZeroVarianceError
from .seeding import stable_seed
from .trace import FEATURE_NAMES

_U64 = np.uint64
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, inline="always")
def _mix64(state):
    # splitmix64 step; state is a one-element uint64 array
    s = state[0] + _GOLDEN
    state[0] = s
    z = (s ^ (s >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


@njit(cache=True)
def _build_tree(X, y, rows_init, max_depth, min_leaf, m_features, seed):
    """Grow one tree; returns flat node arrays (feature -1 marks a leaf)."""
    n = rows_init.shape[0]
    nf = X.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int32)
    threshold = np.zeros(cap, np.float64)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    value = np.zeros(cap, np.float64)
    count = np.zeros(cap, np.int32)
    imp_dec = np.zeros(cap, np.float64)

    rows = rows_init.copy()
    scratch = np.empty(n, rows.dtype)
    vals = np.empty(n, np.float64)
    sv = np.empty(n, np.float64)
    sy = np.empty(n, np.float64)
    feat_perm = np.empty(nf, np.int64)
    state = np.empty(1, np.uint64)
    state[0] = seed

    stack = np.empty((cap, 4), np.int64)  # node, lo, hi, depth
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    stack[0, 3] = 0
    sp = 1
    node_count = 1

    while sp > 0:
        sp -= 1
        node = int(stack[sp, 0])
        lo = int(stack[sp, 1])
        hi = int(stack[sp, 2])
        depth = int(stack[sp, 3])
        cnt = hi - lo

        s = 0.0
        ss = 0.0
        ymin = y[rows[lo]]
        ymax = ymin
        for i in range(lo, hi):
            v = y[rows[i]]
            s += v
            ss += v * v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v
        value[node] = ymin if ymin == ymax else s / cnt
        count[node] = cnt
        if depth >= max_depth or cnt < 2 * min_leaf or ymin == ymax:
            continue
        sse = ss - s * s / cnt
        if sse < 0.0:
            sse = 0.0
        # Distinct (feature, threshold) pairs often induce the same row
        # partition and therefore mathematically equal scores; a tolerance
        # well above accumulation noise keeps the tie-break (lowest feature,
        # then lowest threshold) deterministic and row-order independent.
        score_tol = 1e-10 * ss

        # Draw m distinct candidate features, then visit them in ascending
        # index order so score ties resolve to the lowest feature index.
        m = m_features if m_features < nf else nf
        for j in range(nf):
            feat_perm[j] = j
        for j in range(m):
            r = j + int(_mix64(state) % _U64(nf - j))
            tmp = feat_perm[j]
            feat_perm[j] = feat_perm[r]
            feat_perm[r] = tmp
        for a in range(1, m):
            key = feat_perm[a]
            b = a - 1
            while b >= 0 and feat_perm[b] > key:
                feat_perm[b + 1] = feat_perm[b]
                b -= 1
            feat_perm[b + 1] = key

        best_score = -1.0
        best_f = -1
        best_thr = 0.0
        best_sl = 0.0
        best_ssl = 0.0
        best_k = 0
        for jf in range(m):
            f = int(feat_perm[jf])
            for i in range(cnt):
                vals[i] = X[rows[lo + i], f]
            order = np.argsort(vals[:cnt])
            for i in range(cnt):
                o = order[i]
                sv[i] = vals[o]
                sy[i] = y[rows[lo + o]]
            sl = 0.0
            ssl = 0.0
            for k in range(1, cnt):
                sl += sy[k - 1]
                ssl += sy[k - 1] * sy[k - 1]
                if k < min_leaf or cnt - k < min_leaf:
                    continue
                vkm = sv[k - 1]
                if sv[k] <= vkm:
                    continue
                sr = s - sl
                score = sl * sl / k + sr * sr / (cnt - k)
                if best_f < 0 or score > best_score + score_tol:
                    best_score = score
                    best_f = f
                    thr = 0.5 * (vkm + sv[k])
                    if thr >= sv[k]:  # midpoint rounded up between adjacent floats
                        thr = vkm
                    best_thr = thr
                    best_sl = sl
                    best_ssl = ssl
                    best_k = k

        if best_f < 0:
            continue  # every candidate feature is constant within the node

        nl = 0
        for i in range(lo, hi):
            if X[rows[i], best_f] <= best_thr:
                scratch[nl] = rows[i]
                nl += 1
        for i in range(lo, hi):
            if X[rows[i], best_f] > best_thr:
                scratch[nl] = rows[i]
                nl += 1
        for i in range(cnt):
            rows[lo + i] = scratch[i]

        kr = cnt - best_k
        sse_l = best_ssl - best_sl * best_sl / best_k
        sr = s - best_sl
        sse_r = (ss - best_ssl) - sr * sr / kr
        dec = sse - sse_l - sse_r
        if dec < 0.0:
            dec = 0.0
        feature[node] = best_f
        threshold[node] = best_thr
        imp_dec[node] = dec
        l_id = node_count
        r_id = node_count + 1
        node_count += 2
        left[node] = l_id
        right[node] = r_id
        stack[sp, 0] = r_id
        stack[sp, 1] = lo + best_k
        stack[sp, 2] = hi
        stack[sp, 3] = depth + 1
        sp += 1
        stack[sp, 0] = l_id
        stack[sp, 1] = lo
        stack[sp, 2] = lo + best_k
        stack[sp, 3] = depth + 1
        sp += 1

    return (
        feature[:node_count].copy(),
        threshold[:node_count].copy(),
        left[:node_count].copy(),
        right[:node_count].copy(),
        value[:node_count].copy(),
        count[:node_count].copy(),
        imp_dec[:node_count].copy(),
    )


@njit(cache=True)
def _predict_packed(feature, threshold, left, right, value, offsets, X, out):
    n_trees = offsets.shape[0] - 1
    for i in range(X.shape[0]):
        acc = 0.0
        for t in range(n_trees):
            node = offsets[t]
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            acc += value[node]
        out[i] = acc / n_trees


def warm_up() -> None:
    """Trigger numba compilation of the tree kernels (cached on disk)."""
    X = np.array([[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]])
    y = np.array([1.0, 2.0, 3.0])
    rows = np.arange(3, dtype=np.int64)
    arrs = _build_tree(X, y, rows, 2, 1, 2, np.uint64(1))
    out = np.empty(1)
    offsets = np.array([0, arrs[0].shape[0]], dtype=np.int64)
    _predict_packed(arrs[0], arrs[1], arrs[2], arrs[3], arrs[4], offsets, X[:1], out)


@dataclass(frozen=True)
class TreeParams:
    """Growth limits and split randomization for a single tree."""

    max_depth: int = 20
    min_leaf: int = 1
    max_features: int | None = None  # None: consider all features at every split


@dataclass
class RegressionTree:
    """Flat-array CART regression tree."""

    feature: np.ndarray  # int32, -1 for leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # node means; prediction for leaves
    count: np.ndarray
    impurity_decrease: np.ndarray  # total SSE decrease of each split
    params: TreeParams = field(default_factory=TreeParams)

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depths[self.left[i]] = depths[i] + 1
                depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def predict(self, X: np.ndarray) -> np.ndarray | float:
        X, single = _as_matrix(X, self.feature_count())
        out = np.empty(X.shape[0])
        offsets = np.array([0, self.n_nodes], dtype=np.int64)
        _predict_packed(
            self.feature, self.threshold, self.left, self.right, self.value,
            offsets, X, out,
        )
        return float(out[0]) if single else out

    def feature_count(self) -> int:
        mx = int(self.feature.max())
        return mx + 1 if mx >= 0 else 0

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "count": self.count.tolist(),
            "impurity_decrease": self.impurity_decrease.tolist(),
            "params": {
                "max_depth": self.params.max_depth,
                "min_leaf": self.params.min_leaf,
                "max_features": self.params.max_features,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        p = d["params"]
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int32),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int32),
            right=np.asarray(d["right"], dtype=np.int32),
            value=np.asarray(d["value"], dtype=np.float64),
            count=np.asarray(d["count"], dtype=np.int32),
            impurity_decrease=np.asarray(d["impurity_decrease"], dtype=np.float64),
            params=TreeParams(p["max_depth"], p["min_leaf"], p["max_features"]),
        )


def _as_matrix(X: np.ndarray, min_features: int) -> tuple[np.ndarray, bool]:
    X = np.ascontiguousarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise ModelError(f"feature input must be 1-D or 2-D, got shape {X.shape}")
    if X.shape[1] < min_features:
        raise ModelError(
            f"feature dimension mismatch: model uses feature indices up to "
            f"{min_features - 1}, input has {X.shape[1]} columns"
        )
    return X, single


def _check_training_data(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise DataError(f"bad training shapes: X{X.shape}, y{y.shape}")
    if X.shape[0] == 0:
        raise DataError("training data is empty")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise DataError("training data contains non-finite values")
    return X, y


def train_tree(
    X: np.ndarray,
    y: np.ndarray,
    params: TreeParams = TreeParams(),
    seed: int = 0,
    sample_indices: np.ndarray | None = None,
) -> RegressionTree:
    """Grow a single regression tree on (X, y).

    With max_features=None the split search is exhaustive over all features,
    which makes a depth-1 tree the optimal single split.
    """
    X, y = _check_training_data(X, y)
    rows = (
        np.arange(X.shape[0], dtype=np.int64)
        if sample_indices is None
        else np.ascontiguousarray(sample_indices, dtype=np.int64)
    )
    m = params.max_features if params.max_features is not None else X.shape[1]
    if not 1 <= m <= X.shape[1]:
        raise DataError(f"max_features must be in [1, {X.shape[1]}], got {m}")
    if params.max_depth < 0 or params.min_leaf < 1:
        raise DataError("max_depth must be >= 0 and min_leaf >= 1")
    arrs = _build_tree(
        X, y, rows, params.max_depth, params.min_leaf, m, np.uint64(seed & (2**64 - 1))
    )
    return RegressionTree(*arrs, params=params)


@dataclass
class RegressionForest:
    """Bagged ensemble of regression trees with training metadata."""

    trees: list[RegressionTree]
    n_trees: int
    max_depth: int
    feature_names: tuple[str, ...]
    label_range: tuple[float, float]
    feature_ranges: np.ndarray  # (n_features, 2) training min/max
    seed: int
    mno: str = ""
    direction: str = ""
    _packed: tuple | None = field(default=None, repr=False, compare=False)

    def _pack(self) -> tuple:
        if self._packed is None:
            sizes = [t.n_nodes for t in self.trees]
            offsets = np.zeros(len(sizes) + 1, dtype=np.int64)
            np.cumsum(sizes, out=offsets[1:])
            feature = np.concatenate([t.feature for t in self.trees])
            threshold = np.concatenate([t.threshold for t in self.trees])
            value = np.concatenate([t.value for t in self.trees])
            left = np.concatenate(
                [np.where(t.left >= 0, t.left + off, -1) for t, off in zip(self.trees, offsets)]
            ).astype(np.int32)
            right = np.concatenate(
                [np.where(t.right >= 0, t.right + off, -1) for t, off in zip(self.trees, offsets)]
            ).astype(np.int32)
            self._packed = (feature, threshold, left, right, value, offsets)
        return self._packed

    def predict(self, X: np.ndarray) -> np.ndarray | float:
        """Mean prediction over trees; float for a single sample, array for a matrix."""
        feature, threshold, left, right, value, offsets = self._pack()
        X, single = _as_matrix(X, len(self.feature_names))
        out = np.empty(X.shape[0])
        _predict_packed(feature, threshold, left, right, value, offsets, X, out)
        return float(out[0]) if single else out

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "feature_names": list(self.feature_names),
            "label_range": list(self.label_range),
            "feature_ranges": self.feature_ranges.tolist(),
            "seed": self.seed,
            "mno": self.mno,
            "direction": self.direction,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionForest":
        return cls(
            trees=[RegressionTree.from_dict(t) for t in d["trees"]],
            n_trees=d["n_trees"],
            max_depth=d["max_depth"],
            feature_names=tuple(d["feature_names"]),
            label_range=(d["label_range"][0], d["label_range"][1]),
            feature_ranges=np.asarray(d["feature_ranges"], dtype=np.float64),
            seed=d["seed"],
            mno=d["mno"],
            direction=d["direction"],
        )


def train_forest(
    X: np.ndarray,
    y: np.ndarray,
    n_trees: int = 100,
    max_depth: int = 20,
    seed: int = 0,
    min_leaf: int = 1,
    max_features: int | None = None,
    feature_names: Sequence[str] = FEATURE_NAMES,
    mno: str = "",
    direction: str = "",
) -> RegressionForest:
    """Train a random forest: bootstrap per tree, random feature subset per split.

    max_features defaults to ceil(n_features / 3). Deterministic for a fixed
    seed: per-tree seeds are spawned from one seed sequence.
    """
    X, y = _check_training_data(X, y)
    if n_trees < 1:
        raise DataError(f"n_trees must be >= 1, got {n_trees}")
    nf = X.shape[1]
    m = max_features if max_features is not None else max(1, math.ceil(nf / 3))
    params = TreeParams(max_depth=max_depth, min_leaf=min_leaf, max_features=m)
    n = X.shape[0]
    children = np.random.SeedSequence(seed).spawn(n_trees)
    trees = []
    for child in children:
        gen = np.random.default_rng(child)
        bootstrap = gen.integers(0, n, size=n).astype(np.int64)
        subset_seed = int(gen.integers(0, 2**63, dtype=np.uint64))
        trees.append(train_tree(X, y, params, seed=subset_seed, sample_indices=bootstrap))
    return RegressionForest(
        trees=trees,
        n_trees=n_trees,
        max_depth=max_depth,
        feature_names=tuple(feature_names)[:nf] if len(feature_names) >= nf else tuple(
            f"f{i}" for i in range(nf)
        ),
        label_range=(float(y.min()), float(y.max())),
        feature_ranges=np.column_stack([X.min(axis=0), X.max(axis=0)]),
        seed=seed,
        mno=mno,
        direction=direction,
    )


def r_squared(predictions: np.ndarray, measurements: np.ndarray) -> float:
    """Coefficient of determination: 1 - SSE / total variance of measurements."""
    pred = np.asarray(predictions, dtype=np.float64)
    meas = np.asarray(measurements, dtype=np.float64)
    if pred.shape != meas.shape or pred.ndim != 1:
        raise DataError(f"prediction/measurement shape mismatch: {pred.shape} vs {meas.shape}")
    if pred.shape[0] < 2:
        raise DataError("need at least 2 pairs")
    total = float(np.sum((meas.mean() - meas) ** 2))
    if total == 0.0:
        raise ZeroVarianceError("measurements are all identical; R^2 undefined")
    return 1.0 - float(np.sum((pred - meas) ** 2)) / total


# A trainer maps (X, y, seed) to a fitted predictor with .predict(X) -> array.
Trainer = Callable[[np.ndarray, np.ndarray, int], object]


@dataclass
class EvaluationReport:
    """Aggregated out-of-fold evaluation of one trainer on one data set."""

    r_squared: float
    n: int
    fold_scores: list[float]
    predictions: np.ndarray  # out-of-fold predictions, original row order
    measurements: np.ndarray

    @property
    def residual_pairs(self) -> np.ndarray:
        """(n, 2) array of (prediction, measurement) pairs."""
        return np.column_stack([self.predictions, self.measurements])


def fold_sizes(n: int, k: int) -> list[int]:
    """Near-equal partition sizes: the first n % k folds get one extra row."""
    base = n // k
    return [base + (1 if i < n % k else 0) for i in range(k)]


def cross_validate(
    X: np.ndarray, y: np.ndarray, k: int, trainer: Trainer, seed: int = 0
) -> EvaluationReport:
    """k-fold cross-validation with a shuffled partition.

    The report aggregates the coefficient of determination over all out-of-fold
    (prediction, measurement) pairs; per-fold scores are also kept (NaN where a
    fold is too small or has constant measurements).
    """
    X, y = _check_training_data(X, y)
    n = X.shape[0]
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    if k > n:
        raise DataError(f"k={k} exceeds sample count {n}")
    perm = np.random.default_rng(seed).permutation(n)
    sizes = fold_sizes(n, k)
    preds = np.empty(n, dtype=np.float64)
    fold_scores: list[float] = []
    start = 0
    for fold_idx, size in enumerate(sizes):
        test_idx = perm[start : start + size]
        train_idx = np.concatenate([perm[:start], perm[start + size :]])
        start += size
        model = trainer(X[train_idx], y[train_idx], stable_seed(seed, fold_idx))
        fold_pred = np.atleast_1d(np.asarray(model.predict(X[test_idx]), dtype=np.float64))
        preds[test_idx] = fold_pred
        try:
            fold_scores.append(r_squared(fold_pred, y[test_idx]))
        except DataError:
            fold_scores.append(float("nan"))
    return EvaluationReport(
        r_squared=r_squared(preds, y),
        n=n,
        fold_scores=fold_scores,
        predictions=preds,
        measurements=y.copy(),
    )


def cross_matrix(
    partitions: Sequence[tuple[str, np.ndarray, np.ndarray]],
    trainer: Trainer,
    k: int = 10,
    seed: int = 0,
) -> tuple[list[str], np.ndarray]:
    """R^2 matrix across labeled data partitions (by operator or by scenario).

    Diagonal entries are k-fold cross-validation within a partition; entry
    (i, j) trains on partition i and tests on partition j.
    """
    if len(partitions) < 2:
        raise DataError("need at least 2 partitions")
    labels = [p[0] for p in partitions]
    m = len(partitions)
    out = np.empty((m, m), dtype=np.float64)
    for i, (label_i, Xi, yi) in enumerate(partitions):
        if k > Xi.shape[0]:
            raise DataError(f"partition {label_i!r} too small for {k}-fold CV")
        out[i, i] = cross_validate(Xi, yi, k, trainer, stable_seed(seed, i)).r_squared
        model = trainer(Xi, yi, stable_seed(seed, i, "full"))
        for j, (_, Xj, yj) in enumerate(partitions):
            if j == i:
                continue
            pred = np.asarray(model.predict(Xj), dtype=np.float64)
            out[i, j] = r_squared(pred, yj)
    return labels, out


def mdi_importance(forest: RegressionForest) -> np.ndarray:
    """Relative per-feature importance from summed split variance decreases.

    Every split contributes its total impurity (variance) decrease to its split
    feature; the per-feature totals are normalized to sum to 1.
    """
    nf = len(forest.feature_names)
    totals = np.zeros(nf, dtype=np.float64)
    for tree in forest.trees:
        splits = tree.feature >= 0
        if splits.any():
            totals += np.bincount(
                tree.feature[splits], weights=tree.impurity_decrease[splits], minlength=nf
            )
    total = totals.sum()
    if total <= 0.0:
        raise ModelError("forest has no splits; importance undefined")
    return totals / total


# --- Baseline regressors under the same trainer interface --------------------


class MeanPredictor:
    """Predicts the training-label mean everywhere."""

    def __init__(self, X: np.ndarray, y: np.ndarray, seed: int = 0):
        _, y = _check_training_data(X, y)
        self.mean = float(y.mean())

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.full(X.shape[0], self.mean)


class LeastSquaresPredictor:
    """Ordinary least squares with intercept via the normal equations.

    Falls back to a small ridge term when the normal matrix is singular.
    """

    def __init__(self, X: np.ndarray, y: np.ndarray, seed: int = 0):
        X, y = _check_training_data(X, y)
        Xa = np.column_stack([X, np.ones(X.shape[0])])
        A = Xa.T @ Xa
        b = Xa.T @ y
        try:
            w = np.linalg.solve(A, b)
            if not np.isfinite(w).all():
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            lam = 1e-8 * np.trace(A) / A.shape[0]
            w = np.linalg.solve(A + lam * np.eye(A.shape[0]), b)
        self.coef = w[:-1]
        self.intercept = float(w[-1])

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return X @ self.coef + self.intercept


def forest_trainer(
    n_trees: int = 100, max_depth: int = 20, max_features: int | None = None
) -> Trainer:
    def train(X, y, seed):
        return train_forest(
            X, y, n_trees=n_trees, max_depth=max_depth, seed=seed, max_features=max_features
        )

    return train


def mean_trainer() -> Trainer:
    return MeanPredictor


def ols_trainer() -> Trainer:
    return LeastSquaresPredictor
