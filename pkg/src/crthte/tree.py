"""Axis-aligned regression trees.

The growth kernel is shared by every frequentist learner: plain CART
(fit-the-fit summaries, boosting weak learners, forest members) and the
causal trees of the causal forest, which relabel each node with gradient
pseudo-outcomes before searching for a split.

Trees are stored as flat node arrays.  Node ``0`` is the root; a node is a
leaf when ``left == -1``.  Rows with ``x[feature] <= threshold`` go left.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import DomainError
from .rng import as_generator, kernel_seed

__all__ = [
    "RegressionTree",
    "TreeEnsemble",
    "SuffStats",
    "grow_cart",
    "predict",
    "leaf_membership",
    "grow_forest",
    "presort",
]

UNLIMITED = 1 << 30
_NO_ORDERS = np.zeros((0, 0), dtype=np.int64)


@dataclass(frozen=True)
class SuffStats:
    n: int = 0
    sum: float = 0.0
    sum_sq: float = 0.0

    def __add__(self, other: "SuffStats") -> "SuffStats":
        return SuffStats(self.n + other.n, self.sum + other.sum, self.sum_sq + other.sum_sq)

    @classmethod
    def of(cls, y) -> "SuffStats":
        y = np.asarray(y, dtype=np.float64)
        return cls(int(y.shape[0]), float(y.sum()), float(y @ y))

    @property
    def sse(self) -> float:
        return self.sum_sq - self.sum**2 / self.n if self.n else 0.0


@nb.njit(cache=True)
def _seed(s):
    np.random.seed(s)


@nb.njit(cache=True)
def _best_split(x, y, mult, r, features, min_leaf, arm, min_arm, orders, mark, tag):
    """Exhaustive SSE-reduction split search over ``features`` for node rows ``r``.

    ``r`` holds the node's distinct rows and ``mult`` their multiplicities.
    Large nodes sweep the presorted ``orders`` (filtered by ``mark == tag``),
    small ones sort locally.  Returns ``(feature, threshold, gain)`` with
    ``feature == -1`` when no admissible split exists.  Ties keep the lowest
    feature, then the lowest threshold.
    """
    m = r.shape[0]
    n_all = x.shape[0]
    best_f = -1
    best_t = 0.0
    best_g = 0.0
    total = 0.0
    wtot = 0
    n_treat = 0
    for k in range(m):
        w = mult[r[k]]
        total += w * y[r[k]]
        wtot += w
        if min_arm > 0:
            n_treat += w * arm[r[k]]
    parent = total * total / wtot
    use_presort = orders.shape[0] > 0 and 2.0 * m * np.log2(m + 1.0) > n_all
    seq = np.empty(m, dtype=np.int64)
    xs = np.empty(m)
    for jj in range(features.shape[0]):
        f = features[jj]
        if use_presort:
            c = 0
            for q in range(n_all):
                i = orders[f, q]
                if mark[i] == tag:
                    seq[c] = i
                    c += 1
        else:
            for k in range(m):
                xs[k] = x[r[k], f]
            order = np.argsort(xs, kind="mergesort")
            for k in range(m):
                seq[k] = r[order[k]]
        left = 0.0
        nl = 0
        left_t = 0
        prev = 0.0
        for k in range(m):
            i = seq[k]
            xi = x[i, f]
            if k > 0 and xi > prev:
                nr = wtot - nl
                ok = nl >= min_leaf and nr >= min_leaf
                if ok and min_arm > 0:
                    rt = n_treat - left_t
                    ok = left_t >= min_arm and nl - left_t >= min_arm and rt >= min_arm and nr - rt >= min_arm
                if ok:
                    right = total - left
                    g = left * left / nl + right * right / nr - parent
                    if g > best_g + 1e-12 * (1.0 + abs(best_g)):
                        best_g = g
                        best_f = f
                        t = 0.5 * (prev + xi)
                        if t >= xi:
                            t = prev
                        best_t = t
            w = mult[i]
            left += w * y[i]
            nl += w
            if min_arm > 0:
                left_t += w * arm[i]
            prev = xi
    return best_f, best_t, best_g


@nb.njit(cache=True)
def _presort(x):
    p = x.shape[1]
    out = np.empty((p, x.shape[0]), dtype=np.int64)
    for f in range(p):
        out[f] = np.argsort(x[:, f], kind="mergesort")
    return out


@nb.njit(cache=True)
def _grow(x, y, rows, max_depth, min_leaf, mtry, causal, wres, min_arm_frac, arm, orders):
    """Grow one tree on ``rows`` (repeats allowed, as in bootstrap samples).

    ``causal`` switches the node objective to gradient pseudo-outcomes for
    the residual-on-residual effect, with ``y`` the outcome residual and
    ``wres`` the treatment residual.  ``orders`` may be an empty array, in
    which case every node sorts locally.
    """
    n_all = x.shape[0]
    p = x.shape[1]
    mult = np.zeros(n_all, dtype=np.int64)
    for k in range(rows.shape[0]):
        mult[rows[k]] += 1
    uniq = np.flatnonzero(mult)
    m = uniq.shape[0]
    cap = 2 * m + 1
    if max_depth < 30:
        cap = min(cap, (1 << (max_depth + 1)) - 1)
    feat = np.full(cap, -1, dtype=np.int64)
    thr = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap, dtype=np.int64)
    mark = np.full(n_all, -1, dtype=np.int64)
    work = np.zeros(n_all) if causal else y
    stack_node = np.zeros(cap, dtype=np.int64)
    stack_depth = np.zeros(cap, dtype=np.int64)
    stack_rows = [uniq]
    top = 1
    n_nodes = 1
    all_feats = np.arange(p)
    while top > 0:
        top -= 1
        node = stack_node[top]
        depth = stack_depth[top]
        r = stack_rows.pop()
        nu = r.shape[0]
        s = 0.0
        ss = 0.0
        nw = 0
        for k in range(nu):
            w = mult[r[k]]
            s += w * y[r[k]]
            ss += w * y[r[k]] * y[r[k]]
            nw += w
        value[node] = s / nw
        count[node] = nw
        if depth >= max_depth or nw < 2 * min_leaf or nu < 2:
            continue
        min_arm = 0
        if causal:
            wbar = 0.0
            ybar = 0.0
            n_t = 0
            for k in range(nu):
                w = mult[r[k]]
                wbar += w * wres[r[k]]
                ybar += w * y[r[k]]
                n_t += w * arm[r[k]]
            wbar /= nw
            ybar /= nw
            num = 0.0
            den = 0.0
            for k in range(nu):
                w = mult[r[k]]
                dw = wres[r[k]] - wbar
                num += w * dw * (y[r[k]] - ybar)
                den += w * dw * dw
            if den <= 1e-12 * nw:
                continue
            tau_p = num / den
            varw = den / nw
            for k in range(nu):
                dw = wres[r[k]] - wbar
                work[r[k]] = dw * (y[r[k]] - ybar - tau_p * dw) / varw
            min_arm = max(1, int(np.ceil(min_arm_frac * nw)))
            if n_t < min_arm or nw - n_t < min_arm:
                continue
        else:
            sse = ss - s * s / nw
            if sse <= 1e-13 * (ss + 1e-300):
                continue
        if mtry < p:
            feats = np.sort(np.random.permutation(p)[:mtry])
        else:
            feats = all_feats
        for k in range(nu):
            mark[r[k]] = node
        f, t, g = _best_split(x, work, mult, r, feats, min_leaf, arm, min_arm, orders, mark, node)
        if f < 0:
            continue
        if causal:
            if g <= 0.0:
                continue
        elif g <= 1e-12 * (ss - s * s / nw):
            continue
        lp = np.empty(nu, dtype=np.int64)
        rp = np.empty(nu, dtype=np.int64)
        nl = 0
        nrr = 0
        for k in range(nu):
            if x[r[k], f] <= t:
                lp[nl] = r[k]
                nl += 1
            else:
                rp[nrr] = r[k]
                nrr += 1
        feat[node] = f
        thr[node] = t
        left[node] = n_nodes
        right[node] = n_nodes + 1
        # push right first so the left child is expanded next
        stack_node[top] = n_nodes + 1
        stack_depth[top] = depth + 1
        stack_rows.append(rp[:nrr].copy())
        top += 1
        stack_node[top] = n_nodes
        stack_depth[top] = depth + 1
        stack_rows.append(lp[:nl].copy())
        top += 1
        n_nodes += 2
    return feat[:n_nodes], thr[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes], count[:n_nodes]


@nb.njit(cache=True)
def _apply_one(feat, thr, left, right, x):
    n = x.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while left[node] >= 0:
            if x[i, feat[node]] <= thr[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@nb.njit(cache=True)
def _apply_many(feat, thr, left, right, x):
    T = feat.shape[0]
    n = x.shape[0]
    out = np.empty((T, n), dtype=np.int64)
    for b in range(T):
        for i in range(n):
            node = 0
            while left[b, node] >= 0:
                if x[i, feat[b, node]] <= thr[b, node]:
                    node = left[b, node]
                else:
                    node = right[b, node]
            out[b, i] = node
    return out


@nb.njit(cache=True)
def _predict_mean(feat, thr, left, right, value, x):
    T = feat.shape[0]
    n = x.shape[0]
    out = np.zeros(n)
    for b in range(T):
        for i in range(n):
            node = 0
            while left[b, node] >= 0:
                if x[i, feat[b, node]] <= thr[b, node]:
                    node = left[b, node]
                else:
                    node = right[b, node]
            out[i] += value[b, node]
    return out / T


@nb.njit(cache=True)
def _grow_forest(x, y, flat_rows, offsets, max_depth, min_leaf, mtry, seed, causal, wres, min_arm_frac, arm):
    """Grow ``len(offsets)-1`` trees on the given row blocks.

    Each tree reseeds from ``(seed, b)`` so its randomness never depends on
    the rows seen by the trees before it.
    """
    T = offsets.shape[0] - 1
    results = []
    cap = 1
    orders = _presort(x)
    for b in range(T):
        rows = flat_rows[offsets[b]:offsets[b + 1]]
        np.random.seed((seed + b * 0x9E3779B1) & 0x7FFFFFFF)
        res = _grow(x, y, rows, max_depth, min_leaf, mtry, causal, wres, min_arm_frac, arm, orders)
        results.append(res)
        cap = max(cap, res[0].shape[0])
    feat = np.full((T, cap), -1, dtype=np.int64)
    thr = np.zeros((T, cap))
    left = np.full((T, cap), -1, dtype=np.int64)
    right = np.full((T, cap), -1, dtype=np.int64)
    value = np.zeros((T, cap))
    count = np.zeros((T, cap), dtype=np.int64)
    for b in range(T):
        f, t, l, r, v, c = results[b]
        k = f.shape[0]
        feat[b, :k] = f
        thr[b, :k] = t
        left[b, :k] = l
        right[b, :k] = r
        value[b, :k] = v
        count[b, :k] = c
    return feat, thr, left, right, value, count


@dataclass(frozen=True)
class RegressionTree:
    """A fitted tree in flat-array form."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def is_leaf(self) -> np.ndarray:
        return self.left < 0

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)

    @property
    def depth(self) -> int:
        d = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):
            if self.left[node] >= 0:
                d[self.left[node]] = d[node] + 1
                d[self.right[node]] = d[node] + 1
        return int(d.max())

    def apply(self, x) -> np.ndarray:
        x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return _apply_one(self.feature, self.threshold, self.left, self.right, x)

    def predict(self, x) -> np.ndarray:
        return self.value[self.apply(x)]

    def with_values(self, value: np.ndarray) -> "RegressionTree":
        return RegressionTree(self.feature, self.threshold, self.left, self.right, np.asarray(value, float), self.count)

    def to_dict(self, feature_names=None, node: int = 0) -> dict:
        """Nested dictionary form used for JSON reports."""
        out = {"node": node, "n": int(self.count[node]), "value": float(self.value[node])}
        if self.left[node] >= 0:
            f = int(self.feature[node])
            out["feature"] = feature_names[f] if feature_names is not None else f
            out["feature_index"] = f
            out["threshold"] = float(self.threshold[node])
            out["left"] = self.to_dict(feature_names, int(self.left[node]))
            out["right"] = self.to_dict(feature_names, int(self.right[node]))
        return out

    def to_json(self, feature_names=None, **kw) -> str:
        return json.dumps(self.to_dict(feature_names), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        nodes = []

        def walk(nd):
            nodes.append(nd)
            if "left" in nd:
                walk(nd["left"])
                walk(nd["right"])

        walk(d)
        index = {nd["node"]: k for k, nd in enumerate(nodes)}
        m = len(nodes)
        feat = np.full(m, -1, dtype=np.int64)
        thr = np.zeros(m)
        left = np.full(m, -1, dtype=np.int64)
        right = np.full(m, -1, dtype=np.int64)
        val = np.zeros(m)
        cnt = np.zeros(m, dtype=np.int64)
        for k, nd in enumerate(nodes):
            val[k] = nd["value"]
            cnt[k] = nd["n"]
            if "left" in nd:
                feat[k] = nd["feature_index"]
                thr[k] = nd["threshold"]
                left[k] = index[nd["left"]["node"]]
                right[k] = index[nd["right"]["node"]]
        return cls(feat, thr, left, right, val, cnt)


def _check_xy(x, y):
    x = np.array(np.atleast_2d(x), dtype=np.float64, order="C")
    y = np.array(y, dtype=np.float64).reshape(-1)
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise DomainError("cannot grow a tree on empty input")
    if x.shape[0] != y.shape[0]:
        raise DomainError("x and y have different row counts")
    return x, y


def grow_cart(x, y, max_depth: int | None = None, min_leaf: int = 1, *, rows=None, mtry=None, rng=None, orders=None):
    """Greedy variance-reduction CART with mean-valued leaves.

    ``rows`` optionally restricts (or bootstraps, with repeats) the training
    rows; ``mtry`` enables per-node feature subsampling.
    """
    x, y = _check_xy(x, y)
    if min_leaf < 1:
        raise DomainError("min_leaf must be >= 1")
    depth = UNLIMITED if max_depth is None else int(max_depth)
    if depth < 0:
        raise DomainError("max_depth must be >= 0")
    p = x.shape[1]
    mtry = p if mtry is None else int(min(max(mtry, 1), p))
    if mtry < p:
        _seed(kernel_seed(as_generator(rng)))
    rows = np.arange(x.shape[0]) if rows is None else np.ascontiguousarray(rows, dtype=np.int64)
    if orders is None:
        orders = _presort(x) if x.shape[0] > 64 else _NO_ORDERS
    f, t, l, r, v, c = _grow(x, y, rows, depth, int(min_leaf), mtry, False, np.zeros(1), 0.0, np.zeros(1, dtype=np.int64), orders)
    return RegressionTree(f, t, l, r, v, c)


def presort(x) -> np.ndarray:
    """Per-feature row orders, reusable across many trees on the same ``x``."""
    return _presort(np.ascontiguousarray(np.asarray(x, dtype=np.float64)))


def predict(tree: RegressionTree, x) -> float | np.ndarray:
    """Leaf value(s) of the routing leaf; a 1-D ``x`` is a single row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return float(tree.predict(x[None, :])[0])
    return tree.predict(x)


def leaf_membership(tree: RegressionTree, x) -> np.ndarray:
    """Index of the leaf (among ``tree.leaves``, in node order) for each row."""
    nodes = tree.apply(x)
    rank = np.full(tree.n_nodes, -1, dtype=np.int64)
    rank[tree.leaves] = np.arange(tree.leaves.shape[0])
    return rank[nodes]


@dataclass(frozen=True)
class TreeEnsemble:
    """Stacked node arrays of ``T`` trees, padded to a common width."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray

    @property
    def n_trees(self) -> int:
        return int(self.feature.shape[0])

    def apply(self, x) -> np.ndarray:
        x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return _apply_many(self.feature, self.threshold, self.left, self.right, x)

    def predict(self, x) -> np.ndarray:
        """Mean of member-tree predictions."""
        x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return _predict_mean(self.feature, self.threshold, self.left, self.right, self.value, x)

    def predict_sum(self, x) -> np.ndarray:
        return self.predict(x) * self.n_trees

    def tree(self, b: int) -> RegressionTree:
        k = int(np.max(np.flatnonzero(self.count[b] > 0))) + 1
        return RegressionTree(
            self.feature[b, :k], self.threshold[b, :k], self.left[b, :k], self.right[b, :k], self.value[b, :k], self.count[b, :k]
        )

    @classmethod
    def stack(cls, trees: list[RegressionTree]) -> "TreeEnsemble":
        cap = max(t.n_nodes for t in trees)
        T = len(trees)
        feat = np.full((T, cap), -1, dtype=np.int64)
        thr = np.zeros((T, cap))
        left = np.full((T, cap), -1, dtype=np.int64)
        right = np.full((T, cap), -1, dtype=np.int64)
        val = np.zeros((T, cap))
        cnt = np.zeros((T, cap), dtype=np.int64)
        for b, t in enumerate(trees):
            k = t.n_nodes
            feat[b, :k], thr[b, :k], left[b, :k], right[b, :k], val[b, :k], cnt[b, :k] = (
                t.feature, t.threshold, t.left, t.right, t.value, t.count,
            )
        return cls(feat, thr, left, right, val, cnt)


def grow_forest(
    x, y, row_blocks: list[np.ndarray], max_depth, min_leaf, mtry, seed: int,
    *, treatment_residual=None, arm=None, min_arm_frac: float = 0.0,
) -> TreeEnsemble:
    """Grow one tree per row block inside a single compiled loop.

    Passing ``treatment_residual`` grows causal trees: ``y`` is then the
    outcome residual, splits maximise heterogeneity of the local
    residual-on-residual slope, and each child must keep at least
    ``ceil(min_arm_frac * n)`` rows of each ``arm``.  Leaf values stay the
    mean of ``y`` and are normally overwritten by the caller.
    """
    x, y = _check_xy(x, y)
    causal = treatment_residual is not None
    wres = np.ascontiguousarray(treatment_residual, dtype=np.float64) if causal else np.zeros(1)
    arm_ = np.ascontiguousarray(arm, dtype=np.int64) if arm is not None else np.zeros(max(1, x.shape[0] * causal), dtype=np.int64)
    p = x.shape[1]
    mtry = p if mtry is None else int(min(max(mtry, 1), p))
    depth = UNLIMITED if max_depth is None else int(max_depth)
    offsets = np.zeros(len(row_blocks) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(r) for r in row_blocks])
    flat = np.ascontiguousarray(np.concatenate(row_blocks).astype(np.int64))
    return TreeEnsemble(
        *_grow_forest(x, y, flat, offsets, depth, int(min_leaf), mtry, int(seed), causal, wres, float(min_arm_frac), arm_)
    )

