"""Mixed-effects gradient boosting with a grouped random intercept.

Two variants share ``f_GB`` and the Gaussian working loss ``L_RE``:

* ``GPB`` alternates a Nelder-Mead step on the log variance components with
  a tree fitted to the GLS gradient ``Omega^{-1} (y - f)``; leaf values come
  from the exact Newton-GLS solve (or the plain gradient, as an option).
* ``MEGB`` fits least-squares trees to ``Y - b - f`` and refreshes the
  intercepts and variances by the same BLUP/EM step as MERF.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .data import ClusteredDataset, VarianceComponents, cluster_sums, working_loss_from_sums
from .ensembles import em_variance_step
from .errors import DomainError
from .rng import as_generator
from .tree import RegressionTree, TreeEnsemble, grow_cart, leaf_membership, presort

__all__ = ["BoostConfig", "BoostModel", "fit_gpboost", "fit_megb", "fit_boost", "cate_boost", "gls_gradient"]

_DEFAULTS = {
    "GPB": dict(rounds=2000, learning_rate=0.1, max_depth=4, min_leaf=100),
    "MEGB": dict(rounds=500, learning_rate=0.05, max_depth=2, min_leaf=5),
}
_LOG_FLOOR = np.log(1e-10)


@dataclass(frozen=True)
class BoostConfig:
    variant: str = "GPB"
    rounds: int | None = None
    learning_rate: float | None = None
    max_depth: int | None = None
    min_leaf: int | None = None
    l2_leaf: float = 0.0
    variance_update_every: int = 1
    leaf_mode: str = "newton"
    fix_sigma_b2: float | None = None

    def __post_init__(self):
        if self.variant not in _DEFAULTS:
            raise DomainError(f"unknown boosting variant {self.variant!r}")
        for k, v in _DEFAULTS[self.variant].items():
            if getattr(self, k) is None:
                object.__setattr__(self, k, v)
        if not 0.0 < self.learning_rate <= 1.0:
            raise DomainError("learning_rate must lie in (0, 1]")
        if self.rounds < 1:
            raise DomainError("rounds must be >= 1")
        if self.l2_leaf < 0:
            raise DomainError("l2_leaf must be >= 0")
        if self.variance_update_every < 1:
            raise DomainError("variance_update_every must be >= 1")
        if self.leaf_mode not in ("newton", "gradient"):
            raise DomainError("leaf_mode must be 'newton' or 'gradient'")

    def replace(self, **kw) -> "BoostConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class BoostModel:
    init: float
    learning_rate: float
    trees: list
    intercepts: np.ndarray
    vc: VarianceComponents
    trace: list = field(default_factory=list)
    variant: str = "GPB"

    def predict(self, design) -> np.ndarray:
        design = np.atleast_2d(np.asarray(design, dtype=np.float64))
        if not self.trees:
            return np.full(design.shape[0], self.init)
        return self.init + self.learning_rate * TreeEnsemble.stack(self.trees).predict_sum(design)

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["round", "L_RE", "sigma_b2", "sigma2"])
            for t in self.trace:
                w.writerow([t["round"], repr(t["L_RE"]), repr(t["sigma_b2"]), repr(t["sigma2"])])


def _init_vc(y, fix):
    vy = float(np.var(y)) or 1.0
    if fix is not None:
        return VarianceComponents(float(fix), vy)
    return VarianceComponents(0.1 * vy, 0.9 * vy)


def gls_gradient(r, cluster_id, n_clusters, vc: VarianceComponents) -> np.ndarray:
    """``Omega^{-1} r`` for block-diagonal ``Omega_i = sigma2 I + sigma_b2 11'``."""
    cnt, s, _ = cluster_sums(r, cluster_id, n_clusters)
    c = vc.sigma_b2 / (vc.sigma2 + cnt * vc.sigma_b2)
    return (r - (c * s)[cluster_id]) / vc.sigma2


def _newton_leaves(leaf, n_leaves, g, cluster_id, n_clusters, vc, l2):
    """Joint leaf values minimising ``0.5 (r - H v)' Omega^{-1} (r - H v) + 0.5 l2 |v|^2``."""
    cnt = np.bincount(cluster_id, minlength=n_clusters).astype(np.float64)
    c = vc.sigma_b2 / (vc.sigma2 + cnt * vc.sigma_b2)
    nil = np.zeros((n_clusters, n_leaves))
    np.add.at(nil, (cluster_id, leaf), 1.0)
    H = (np.diag(nil.sum(axis=0)) - (nil * c[:, None]).T @ nil) / vc.sigma2
    H[np.diag_indices(n_leaves)] += l2
    rhs = np.bincount(leaf, weights=g, minlength=n_leaves)
    return np.linalg.solve(H, rhs)


def _variance_step(cnt, s, ss, vc: VarianceComponents, fix):
    """Nelder-Mead on log variances, warm-started; never returns a worse point."""
    f_old = working_loss_from_sums(cnt, s, ss, vc.sigma_b2, vc.sigma2)
    if fix is not None:
        def obj1(t):
            return working_loss_from_sums(cnt, s, ss, float(fix), float(np.exp(t[0])))

        res = minimize(obj1, [np.log(vc.sigma2)], method="Nelder-Mead", options={"xatol": 1e-6, "fatol": 1e-12})
        new = VarianceComponents(float(fix), float(np.exp(res.x[0])))
    else:
        def obj(t):
            return working_loss_from_sums(cnt, s, ss, float(np.exp(max(t[0], _LOG_FLOOR))), float(np.exp(t[1])))

        x0 = [np.log(max(vc.sigma_b2, 1e-10)), np.log(vc.sigma2)]
        res = minimize(obj, x0, method="Nelder-Mead", options={"xatol": 1e-6, "fatol": 1e-12})
        sb2 = float(np.exp(max(res.x[0], _LOG_FLOOR)))
        new = VarianceComponents(sb2 if sb2 > 1e-10 else 0.0, float(np.exp(res.x[1])))
    f_new = working_loss_from_sums(cnt, s, ss, new.sigma_b2, new.sigma2)
    if f_new > f_old:
        return vc, f_old, f_old
    return new, f_old, f_new


def fit_gpboost(data: ClusteredDataset, cfg: BoostConfig | None = None, seed=None) -> BoostModel:
    """Coordinate-wise covariance and tree updates of the GLS boosting objective."""
    cfg = cfg or BoostConfig("GPB")
    if cfg.variant != "GPB":
        raise DomainError("fit_gpboost requires variant GPB")
    x = data.design()
    y = np.asarray(data.outcome, dtype=np.float64)
    cid, I = data.cluster_id, data.n_clusters
    orders = presort(x)
    init = float(np.mean(y))
    f = np.full(data.n, init)
    vc = _init_vc(y, cfg.fix_sigma_b2)
    trees, trace = [], []
    cnt, s, ss = cluster_sums(y - f, cid, I)
    trace.append({"round": 0, "L_RE": working_loss_from_sums(cnt, s, ss, vc.sigma_b2, vc.sigma2),
                  "L_RE_before": np.nan, "sigma_b2": vc.sigma_b2, "sigma2": vc.sigma2})
    for m in range(1, cfg.rounds + 1):
        r = y - f
        cnt, s, ss = cluster_sums(r, cid, I)
        before = after = working_loss_from_sums(cnt, s, ss, vc.sigma_b2, vc.sigma2)
        if (m - 1) % cfg.variance_update_every == 0:
            vc, before, after = _variance_step(cnt, s, ss, vc, cfg.fix_sigma_b2)
        g = gls_gradient(r, cid, I, vc)
        tree = grow_cart(x, g, cfg.max_depth, cfg.min_leaf, orders=orders)
        if cfg.leaf_mode == "newton":
            leaf = leaf_membership(tree, x)
            vals = _newton_leaves(leaf, tree.leaves.shape[0], g, cid, I, vc, cfg.l2_leaf)
            value = tree.value.copy()
            value[tree.leaves] = vals
            tree = tree.with_values(value)
        f = f + cfg.learning_rate * tree.predict(x)
        trees.append(tree)
        cnt, s, ss = cluster_sums(y - f, cid, I)
        trace.append({"round": m, "L_RE": working_loss_from_sums(cnt, s, ss, vc.sigma_b2, vc.sigma2),
                      "L_RE_before": before, "L_RE_after": after, "sigma_b2": vc.sigma_b2, "sigma2": vc.sigma2})
    cnt, s, _ = cluster_sums(y - f, cid, I)
    b = np.zeros(I) if vc.sigma_b2 == 0 else vc.sigma_b2 / (vc.sigma_b2 + vc.sigma2 / np.maximum(cnt, 1)) * s / np.maximum(cnt, 1)
    return BoostModel(init, cfg.learning_rate, trees, b, vc, trace, "GPB")


def fit_megb(data: ClusteredDataset, cfg: BoostConfig | None = None, seed=None) -> BoostModel:
    """Pseudo-outcome least-squares boosting with BLUP/EM intercept refresh."""
    cfg = cfg or BoostConfig("MEGB")
    if cfg.variant != "MEGB":
        raise DomainError("fit_megb requires variant MEGB")
    x = data.design()
    y = np.asarray(data.outcome, dtype=np.float64)
    cid, I = data.cluster_id, data.n_clusters
    orders = presort(x)
    init = float(np.mean(y))
    f = np.full(data.n, init)
    b = np.zeros(I)
    vc = _init_vc(y, cfg.fix_sigma_b2)
    trees, trace = [], []
    for m in range(1, cfg.rounds + 1):
        r = y - b[cid] - f
        tree = grow_cart(x, r, cfg.max_depth, cfg.min_leaf, orders=orders)
        f = f + cfg.learning_rate * tree.predict(x)
        trees.append(tree)
        cnt, s, ss = cluster_sums(y - f, cid, I)
        before = working_loss_from_sums(cnt, s, ss, vc.sigma_b2, vc.sigma2)
        if (m - 1) % cfg.variance_update_every == 0:
            b, vc = em_variance_step(cnt, s, ss, vc, cfg.fix_sigma_b2)
        after = working_loss_from_sums(cnt, s, ss, vc.sigma_b2, vc.sigma2)
        trace.append({"round": m, "L_RE": after, "L_RE_before": before, "sigma_b2": vc.sigma_b2, "sigma2": vc.sigma2})
    return BoostModel(init, cfg.learning_rate, trees, b, vc, trace, "MEGB")


def fit_boost(data: ClusteredDataset, cfg: BoostConfig, seed=None) -> BoostModel:
    return fit_gpboost(data, cfg, seed) if cfg.variant == "GPB" else fit_megb(data, cfg, seed)


def cate_boost(model: BoostModel, x, v) -> np.ndarray:
    """``f_GB(x, v, 1) - f_GB(x, v, 0)``."""
    z = np.hstack([np.atleast_2d(x), np.atleast_2d(v)])
    ones = np.ones((z.shape[0], 1))
    return model.predict(np.hstack([z, ones])) - model.predict(np.hstack([z, 0 * ones]))
