"""Random-decision-forest regression, one model per objective.

Trees are grown with CART variance-reduction splits over a random feature
subset per node. The hot loops (growing, predicting) are numba kernels over
flat node arrays; everything else is plain numpy.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

LEAF = -1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_leaf: int = 2
    feature_subsample: float = 1.0 / 3.0
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.min_samples_leaf < 1:
            raise ValueError(f"min_samples_leaf must be >= 1, got {self.min_samples_leaf}")
        if not 0.0 < self.feature_subsample <= 1.0:
            raise ValueError(f"feature_subsample must be in (0, 1], got {self.feature_subsample}")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError(f"max_depth must be >= 0 or None, got {self.max_depth}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")

    def features_per_split(self, n_features: int) -> int:
        # tolerance keeps 1/3 * 9 at 3 rather than 2
        return max(1, min(n_features, math.ceil(self.feature_subsample * n_features - 1e-9)))


@dataclass(frozen=True)
class RegressionTree:
    """Flat binary tree. ``feature[i] == -1`` marks node i as a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    def predict(self, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        return _predict_tree(xs, self.feature, self.threshold, self.left, self.right, self.value)

    def to_dict(self) -> dict:
        def walk(i):
            if self.feature[i] == LEAF:
                return {"value": float(self.value[i])}
            return {
                "feature": int(self.feature[i]),
                "threshold": float(self.threshold[i]),
                "left": walk(self.left[i]),
                "right": walk(self.right[i]),
            }

        return walk(0)


@dataclass
class ForestModel:
    trees: list[RegressionTree]
    objective_name: str
    training_size: int
    n_features: int
    y_min: float
    y_max: float
    params: ForestParams = field(default_factory=ForestParams)

    def __post_init__(self):
        offsets = np.cumsum([0] + [t.n_nodes for t in self.trees])
        self._roots = offsets[:-1].astype(np.int64)
        self._feature = np.concatenate([t.feature for t in self.trees])
        self._threshold = np.concatenate([t.threshold for t in self.trees])
        self._left = np.concatenate([np.where(t.left >= 0, t.left + o, LEAF) for t, o in zip(self.trees, offsets)])
        self._right = np.concatenate([np.where(t.right >= 0, t.right + o, LEAF) for t, o in zip(self.trees, offsets)])
        self._value = np.concatenate([t.value for t in self.trees])

    def predict_matrix(self, xs: np.ndarray) -> np.ndarray:
        xs = np.ascontiguousarray(xs, dtype=np.float64)
        if xs.ndim != 2 or xs.shape[1] != self.n_features:
            raise ValueError(f"expected feature width {self.n_features}, got shape {xs.shape}")
        return _predict_forest(
            xs, self._feature, self._threshold, self._left, self._right, self._value,
            self._roots, self.y_min, self.y_max,
        )

    def to_json(self) -> str:
        return json.dumps({
            "objective": self.objective_name,
            "training_size": self.training_size,
            "n_features": self.n_features,
            "y_range": [self.y_min, self.y_max],
            "params": asdict(self.params),
            "trees": [t.to_dict() for t in self.trees],
        })


@njit(cache=True)
def _grow(X, y, rows, keys, n_sub, max_depth, min_leaf):
    n_rows = rows.shape[0]
    cap = 2 * n_rows
    feature = np.full(cap, LEAF, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, LEAF, np.int64)
    right = np.full(cap, LEAF, np.int64)
    value = np.zeros(cap)

    idx = rows.copy()
    tmp = np.empty(n_rows, np.int64)
    xbuf = np.empty(n_rows)
    ybuf = np.empty(n_rows)
    st_node = np.empty(cap, np.int64)
    st_start = np.empty(cap, np.int64)
    st_end = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    top = 1
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n_rows
    st_depth[0] = 0
    n_nodes = 1

    while top > 0:
        top -= 1
        node = st_node[top]
        start = st_start[top]
        end = st_end[top]
        depth = st_depth[top]
        m = end - start

        total = 0.0
        lo = np.inf
        hi = -np.inf
        for k in range(start, end):
            yk = y[idx[k]]
            total += yk
            if yk < lo:
                lo = yk
            if yk > hi:
                hi = yk
        mean = total / m
        value[node] = min(max(mean, lo), hi)
        if hi <= lo or m < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue

        order = np.argsort(keys[node])
        best_score = -np.inf
        best_f = -1
        best_thr = 0.0
        for phase in range(2):
            if phase == 0:
                cand = np.sort(order[:n_sub])
            else:
                cand = np.sort(order[n_sub:])
            for f in cand:
                for k in range(m):
                    r = idx[start + k]
                    xbuf[k] = X[r, f]
                    ybuf[k] = y[r] - mean
                perm = np.argsort(xbuf[:m], kind="mergesort")
                csum = 0.0
                for k in range(m):
                    csum += ybuf[k]
                sl = 0.0
                for i in range(m - 1):
                    sl += ybuf[perm[i]]
                    nl = i + 1
                    nr = m - nl
                    if nr < min_leaf:
                        break
                    if nl < min_leaf:
                        continue
                    a = xbuf[perm[i]]
                    b = xbuf[perm[i + 1]]
                    if a == b:
                        continue
                    sr = csum - sl
                    score = sl * sl / nl + sr * sr / nr
                    if score > best_score:
                        best_score = score
                        best_f = f
                        thr = a + (b - a) * 0.5
                        if thr >= b:
                            thr = a
                        best_thr = thr
            if best_f >= 0:
                break
        if best_f < 0:
            continue

        # stable partition of idx[start:end]
        nl = 0
        for k in range(start, end):
            if X[idx[k], best_f] <= best_thr:
                nl += 1
        li = start
        ri = start + nl
        for k in range(start, end):
            r = idx[k]
            if X[r, best_f] <= best_thr:
                tmp[li] = r
                li += 1
            else:
                tmp[ri] = r
                ri += 1
        for k in range(start, end):
            idx[k] = tmp[k]

        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lc
        right[node] = rc
        st_node[top] = rc
        st_start[top] = start + nl
        st_end[top] = end
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lc
        st_start[top] = start
        st_end[top] = start + nl
        st_depth[top] = depth + 1
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy())


@njit(cache=True)
def _predict_tree(X, feature, threshold, left, right, value):
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        node = 0
        while feature[node] != LEAF:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = value[node]
    return out


@njit(cache=True)
def _predict_forest(X, feature, threshold, left, right, value, roots, lo, hi):
    n_trees = roots.shape[0]
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        s = 0.0
        for t in range(n_trees):
            node = roots[t]
            while feature[node] != LEAF:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            s += value[node]
        out[i] = min(max(s / n_trees, lo), hi)
    return out


@njit(cache=True)
def _accumulate_grid(sums, feature, threshold, left, right, value, root,
                     feat_param, feat_table, counts, strides):
    """Add one tree's leaf values into ``sums`` over a full Cartesian grid.

    Each leaf covers the product of per-parameter allowed value sets; the
    sets are tracked as boolean masks while descending.
    """
    n_params = counts.shape[0]
    max_vals = feat_table.shape[1]
    cap = 64
    st_node = np.empty(cap, np.int64)
    st_mask = np.empty((cap, n_params, max_vals), np.bool_)
    st_node[0] = root
    for j in range(n_params):
        for v in range(max_vals):
            st_mask[0, j, v] = v < counts[j]
    top = 1
    sel = np.empty((n_params, max_vals), np.int64)
    lens = np.empty(n_params, np.int64)
    pos = np.empty(n_params, np.int64)
    while top > 0:
        top -= 1
        node = st_node[top]
        mask = st_mask[top].copy()
        f = feature[node]
        if f != LEAF:
            if top + 2 > cap:
                cap *= 2
                grown_node = np.empty(cap, np.int64)
                grown_mask = np.empty((cap, n_params, max_vals), np.bool_)
                grown_node[:top] = st_node[:top]
                grown_mask[:top] = st_mask[:top]
                st_node = grown_node
                st_mask = grown_mask
            j = feat_param[f]
            thr = threshold[node]
            lmask = mask.copy()
            rmask = mask.copy()
            any_l = False
            any_r = False
            for v in range(counts[j]):
                if mask[j, v]:
                    if feat_table[f, v] <= thr:
                        rmask[j, v] = False
                        any_l = True
                    else:
                        lmask[j, v] = False
                        any_r = True
            if any_r:
                st_node[top] = right[node]
                st_mask[top] = rmask
                top += 1
            if any_l:
                st_node[top] = left[node]
                st_mask[top] = lmask
                top += 1
            continue
        val = value[node]
        for j in range(n_params):
            n = 0
            for v in range(counts[j]):
                if mask[j, v]:
                    sel[j, n] = v
                    n += 1
            lens[j] = n
            pos[j] = 0
        # trailing parameters with every value selected form one contiguous block
        tail = n_params
        while tail > 0 and lens[tail - 1] == counts[tail - 1]:
            tail -= 1
        if tail == 0:
            for k in range(sums.shape[0]):
                sums[k] += val
            continue
        block = 1 if tail == n_params else strides[tail - 1]
        # odometer over the remaining selected index sets
        last = tail - 1
        base = 0
        for j in range(last):
            base += sel[j, 0] * strides[j]
        while True:
            for k in range(lens[last]):
                start = base + sel[last, k] * strides[last]
                for b in range(block):
                    sums[start + b] += val
            j = last - 1
            while j >= 0:
                base -= sel[j, pos[j]] * strides[j]
                pos[j] += 1
                if pos[j] < lens[j]:
                    base += sel[j, pos[j]] * strides[j]
                    break
                pos[j] = 0
                base += sel[j, 0] * strides[j]
                j -= 1
            if j < 0:
                break


def _canonical_order(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    # lexsort treats the last key as primary: feature 0 first, target last
    keys = [ys] + [xs[:, j] for j in range(xs.shape[1] - 1, -1, -1)]
    return np.lexsort(keys)


def fit_forest(xs, ys, params: ForestParams | None = None, objective_name: str = "") -> ForestModel:
    """Train a random forest on (xs, ys).

    The training pairs are sorted canonically before any randomness is drawn,
    so the model does not depend on the order in which samples arrived.
    Tree ``i`` draws from a generator seeded with ``(params.seed, i)``.
    """
    params = params or ForestParams()
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if ys.ndim != 1 or ys.shape[0] == 0:
        raise ValueError("training set is empty")
    if xs.ndim != 2 or xs.shape[0] != ys.shape[0]:
        raise ValueError(f"length mismatch: {xs.shape[0] if xs.ndim else 0} feature vectors, {ys.shape[0]} targets")
    if not np.all(np.isfinite(ys)):
        raise ValueError("non-finite training target")
    if not np.all(np.isfinite(xs)):
        raise ValueError("non-finite feature value")

    order = _canonical_order(xs, ys)
    X = np.ascontiguousarray(xs[order])
    y = np.ascontiguousarray(ys[order])
    n, d = X.shape
    n_sub = params.features_per_split(d) if d else 0
    max_depth = -1 if params.max_depth is None else params.max_depth

    trees = []
    for t in range(params.n_trees):
        rng = np.random.default_rng([params.seed, t])
        if params.bootstrap:
            rows = rng.integers(0, n, size=n).astype(np.int64)
        else:
            rows = np.arange(n, dtype=np.int64)
        keys = rng.random((2 * n, d))
        trees.append(RegressionTree(*_grow(X, y, rows, keys, n_sub, max_depth, params.min_samples_leaf)))
    return ForestModel(trees, objective_name, n, d, float(y.min()), float(y.max()), params)


def predict_grid(model: ForestModel, space) -> np.ndarray:
    """Predictions for every configuration of ``space``, in flat-index order.

    Bit-identical to ``model.predict_matrix(space.encode_flat(arange))`` but
    visits each tree leaf once instead of each (point, tree) pair.
    """
    if space.width != model.n_features:
        raise ValueError(f"space width {space.width} does not match model width {model.n_features}")
    counts = np.asarray(space.shape, dtype=np.int64)
    max_vals = int(counts.max())
    feat_param = np.empty(space.width, dtype=np.int64)
    feat_table = np.full((space.width, max_vals), np.nan)
    col = 0
    for j, table in enumerate(space._tables):
        for c in range(table.shape[1]):
            feat_param[col] = j
            feat_table[col, : table.shape[0]] = table[:, c]
            col += 1
    strides = np.ones(len(counts), dtype=np.int64)
    for j in range(len(counts) - 2, -1, -1):
        strides[j] = strides[j + 1] * counts[j + 1]
    sums = np.zeros(space.cardinality)
    for root in model._roots:
        _accumulate_grid(sums, model._feature, model._threshold, model._left, model._right,
                         model._value, root, feat_param, feat_table, counts, strides)
    return np.clip(sums / len(model.trees), model.y_min, model.y_max)


def predict(model: ForestModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a single feature vector, got shape {x.shape}")
    return float(model.predict_matrix(x.reshape(1, -1))[0])


def predict_batch(model: ForestModel, xs) -> list[float]:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        return []
    return model.predict_matrix(xs).tolist()
