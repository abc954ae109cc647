"""Frequentist forest learners: MERF and a cluster-aware honest causal forest."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numba as nb
import numpy as np
from scipy.special import erfc
from scipy.stats import norm

from .data import CateEstimate, ClusteredDataset, VarianceComponents, cluster_sums, working_loss_from_sums
from .errors import DomainError
from .rng import as_generator, kernel_seed
from .tree import TreeEnsemble, grow_forest

__all__ = [
    "MerfConfig",
    "MerfModel",
    "CfConfig",
    "CausalForest",
    "fit_merf",
    "blup_intercepts",
    "em_variance_step",
    "cate_merf",
    "fit_causal_forest",
    "bayes_debias",
]


# ---------------------------------------------------------------- shared BLUP/EM


def blup_intercepts(residuals, vc: VarianceComponents) -> np.ndarray:
    """Shrunken cluster mean residuals ``sigma_b2 / (sigma_b2 + sigma2 / N_i) * rbar_i``."""
    if vc.sigma2 <= 0:
        raise DomainError("sigma2 must be positive")
    out = np.zeros(len(residuals))
    for i, r in enumerate(residuals):
        r = np.asarray(r, dtype=np.float64)
        if r.size == 0 or vc.sigma_b2 == 0.0:
            continue
        w = vc.sigma_b2 / (vc.sigma_b2 + vc.sigma2 / r.size)
        out[i] = w * r.mean()
    return out


def em_variance_step(cnt, s, ss, vc: VarianceComponents, fix_sigma_b2: float | None = None):
    """One EM update of ``(sigma_b2, sigma2)`` from per-cluster residual sums.

    Returns the intercept predictions under the old components and the new
    components.  This is EM for the marginal Gaussian likelihood of the
    residuals, so the working loss cannot increase.
    """
    sb2, s2 = vc.sigma_b2, vc.sigma2
    n = cnt.sum()
    if sb2 <= 0.0:
        b = np.zeros_like(s)
        v = np.zeros_like(s)
    else:
        v = 1.0 / (1.0 / sb2 + cnt / s2)
        b = v * s / s2
    # E[sum_j (r_ij - b_i)^2] = ss - 2 b s + N (b^2 + v)
    e_sq = ss - 2.0 * b * s + cnt * (b * b + v)
    new_s2 = max(float(e_sq.sum() / n), 1e-12)
    if fix_sigma_b2 is not None:
        new_sb2 = float(fix_sigma_b2)
    else:
        new_sb2 = float(np.mean(b * b + v))
    return b, VarianceComponents(new_sb2, new_s2)


# ---------------------------------------------------------------- MERF


@dataclass(frozen=True)
class MerfConfig:
    n_trees: int = 500
    mtry: int | None = None
    max_depth: int = 2
    min_leaf: int = 5
    max_em_iter: int = 100
    tol: float = 1e-4
    fix_sigma_b2: float | None = None

    def __post_init__(self):
        if self.tol <= 0:
            raise DomainError("tol must be positive")
        if self.n_trees < 1 or self.min_leaf < 1 or self.max_em_iter < 1:
            raise DomainError("n_trees, min_leaf and max_em_iter must be >= 1")

    def replace(self, **kw) -> "MerfConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class MerfModel:
    forest: TreeEnsemble
    intercepts: np.ndarray
    vc: VarianceComponents
    trace: list = field(default_factory=list)
    converged: bool = False

    def predict(self, design) -> np.ndarray:
        return self.forest.predict(design)

    def write_trace(self, path: str | Path) -> None:
        _write_trace(self.trace, path)


def _write_trace(trace, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["round", "L_RE", "sigma_b2", "sigma2"])
        for t in trace:
            w.writerow([t["round"], repr(t["L_RE"]), repr(t["sigma_b2"]), repr(t["sigma2"])])


def _bootstrap_blocks(n, T, rng):
    return [rng.integers(0, n, n) for _ in range(T)]


def _resolve_mtry(mtry, p):
    m = math.ceil(p / 3) if mtry is None else int(mtry)
    if not 1 <= m <= p:
        raise DomainError(f"mtry must lie in [1, {p}]")
    return m


def fit_merf(data: ClusteredDataset, cfg: MerfConfig | None = None, seed=None) -> MerfModel:
    """Alternate a bagged forest on ``Y - b`` with BLUP/EM updates of the intercepts."""
    cfg = cfg or MerfConfig()
    rng = as_generator(seed)
    x = data.design()
    y = np.asarray(data.outcome, dtype=np.float64)
    cid = data.cluster_id
    I = data.n_clusters
    mtry = _resolve_mtry(cfg.mtry, x.shape[1])
    blocks = _bootstrap_blocks(data.n, cfg.n_trees, rng)
    tree_seed = kernel_seed(rng)
    b = np.zeros(I)
    vy = float(np.var(y)) or 1.0
    if cfg.fix_sigma_b2 is not None:
        vc = VarianceComponents(float(cfg.fix_sigma_b2), vy)
    else:
        vc = VarianceComponents(0.1 * vy, 0.9 * vy)
    trace = []
    converged = False
    prev = None
    forest = None
    for it in range(cfg.max_em_iter):
        forest = grow_forest(x, y - b[cid], blocks, cfg.max_depth, cfg.min_leaf, mtry, tree_seed)
        r = y - forest.predict(x)
        cnt, s, ss = cluster_sums(r, cid, I)
        loss_before = working_loss_from_sums(cnt, s, ss, vc.sigma_b2, vc.sigma2)
        b, vc = em_variance_step(cnt, s, ss, vc, cfg.fix_sigma_b2)
        loss = working_loss_from_sums(cnt, s, ss, vc.sigma_b2, vc.sigma2)
        trace.append({"round": it, "L_RE": loss, "L_RE_before": loss_before, "sigma_b2": vc.sigma_b2, "sigma2": vc.sigma2})
        if prev is not None and abs(prev - loss) <= cfg.tol * abs(prev):
            converged = True
            break
        prev = loss
    return MerfModel(forest, b, vc, trace, converged)


def _contrast_design(x, v):
    z = np.hstack([np.atleast_2d(x), np.atleast_2d(v)])
    one = np.hstack([z, np.ones((z.shape[0], 1))])
    zero = np.hstack([z, np.zeros((z.shape[0], 1))])
    return one, zero


def cate_merf(model: MerfModel, x, v) -> np.ndarray:
    """S-learner contrast ``f(x, v, 1) - f(x, v, 0)``."""
    one, zero = _contrast_design(x, v)
    return model.predict(one) - model.predict(zero)


# ---------------------------------------------------------------- causal forest


@dataclass(frozen=True)
class CfConfig:
    n_trees: int = 2000
    honesty_fraction: float = 0.5
    subsample_rate: float = 0.5
    min_node: int = 5
    propensity: float = 0.5
    mtry: int | None = None
    ci_group_size: int = 2
    imbalance: float = 0.05
    nuisance: str = "oob"
    nuisance_trees: int = 500
    cluster_weighted: bool = False

    def __post_init__(self):
        for name in ("honesty_fraction", "subsample_rate", "propensity"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise DomainError(f"{name} must lie in (0, 1)")
        if self.nuisance not in ("oob", "crossfit"):
            raise DomainError("nuisance must be 'oob' or 'crossfit'")
        if self.ci_group_size < 1 or self.n_trees < self.ci_group_size:
            raise DomainError("n_trees must be at least ci_group_size")
        if self.min_node < 1:
            raise DomainError("min_node must be >= 1")

    def replace(self, **kw) -> "CfConfig":
        return replace(self, **kw)


@nb.njit(cache=True)
def _leaf_moments(nodes, est_flat, est_off, wres, yres, weight, arm, cap):
    """Per tree and node: weight total, weighted sums of ``W*Y~`` and ``W^2``, treated share."""
    T = est_off.shape[0] - 1
    sw = np.zeros((T, cap))
    swy = np.zeros((T, cap))
    sww = np.zeros((T, cap))
    nt = np.zeros((T, cap))
    nc = np.zeros((T, cap))
    for b in range(T):
        for q in range(est_off[b], est_off[b + 1]):
            i = est_flat[q]
            k = nodes[b, i]
            sw[b, k] += weight[i]
            swy[b, k] += weight[i] * wres[i] * yres[i]
            sww[b, k] += weight[i] * wres[i] * wres[i]
            if arm[i] == 1:
                nt[b, k] += 1.0
            else:
                nc[b, k] += 1.0
    return sw, swy, sww, nt, nc


@nb.njit(cache=True)
def _forest_solve(qnodes, sw, swy, sww, nt, nc, use, group_size):
    """Point estimate and little-bags variance ingredients for each query.

    ``use[b, j]`` marks trees admissible for query ``j`` (out-of-bag mask).
    """
    T = qnodes.shape[0]
    m = qnodes.shape[1]
    tau = np.full(m, np.nan)
    var_between = np.zeros(m)
    group_noise = np.zeros(m)
    n_groups = np.zeros(m)
    dropped = np.zeros(m, dtype=np.int64)
    G = T // group_size
    a_b = np.zeros(T)
    d_b = np.zeros(T)
    ok = np.zeros(T, dtype=np.bool_)
    for j in range(m):
        num = 0.0
        den = 0.0
        cnt = 0
        for b in range(T):
            ok[b] = False
            if not use[b, j]:
                continue
            k = qnodes[b, j]
            if sw[b, k] <= 0.0 or nt[b, k] == 0.0 or nc[b, k] == 0.0:
                dropped[j] += 1
                continue
            a_b[b] = swy[b, k] / sw[b, k]
            d_b[b] = sww[b, k] / sw[b, k]
            ok[b] = True
            num += a_b[b]
            den += d_b[b]
            cnt += 1
        if cnt == 0 or den <= 0.0:
            continue
        t = num / den
        tau[j] = t
        dbar = den / cnt
        # pseudo-scores psi_b = (a_b - t d_b) / dbar, grouped into little bags
        psum = 0.0
        pcount = 0
        vt = 0.0
        for g in range(G):
            full = True
            for h in range(group_size):
                if not ok[g * group_size + h]:
                    full = False
            if not full:
                continue
            for h in range(group_size):
                b = g * group_size + h
                psi = (a_b[b] - t * d_b[b]) / dbar
                psum += psi
                pcount += 1
        if pcount == 0:
            continue
        pmean = psum / pcount
        vb = 0.0
        ng = 0
        for g in range(G):
            full = True
            for h in range(group_size):
                if not ok[g * group_size + h]:
                    full = False
            if not full:
                continue
            gm = 0.0
            for h in range(group_size):
                b = g * group_size + h
                gm += (a_b[b] - t * d_b[b]) / dbar
            gm /= group_size
            vb += (gm - pmean) ** 2
            for h in range(group_size):
                b = g * group_size + h
                psi = (a_b[b] - t * d_b[b]) / dbar
                vt += (psi - pmean) ** 2
            ng += 1
        vb /= ng
        vt /= ng * group_size
        var_between[j] = vb
        if group_size > 1:
            group_noise[j] = (vt - vb) / (group_size - 1)
        n_groups[j] = ng
    return tau, var_between, group_noise, n_groups, dropped


def bayes_debias(var_between, group_noise, n_groups):
    """Objective-Bayes correction of the little-bags variance estimate.

    The raw difference ``var_between - group_noise`` is replaced by its
    posterior mean under a flat prior on the true variance truncated at 0.
    """
    vb = np.asarray(var_between, dtype=np.float64)
    gn = np.asarray(group_noise, dtype=np.float64)
    ng = np.maximum(np.asarray(n_groups, dtype=np.float64), 1.0)
    est = vb - gn
    se = np.maximum(vb, gn) * np.sqrt(2.0 / ng)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(se > 0, est / se, 0.0)
        num = np.exp(-ratio * ratio / 2.0) / math.sqrt(2 * math.pi)
        den = 0.5 * erfc(-ratio / math.sqrt(2.0))
        corr = np.where(den > 0, se * num / den, 0.0)
    out = est + corr
    return np.where(np.isfinite(out), np.maximum(out, 0.0), 0.0)


@dataclass(frozen=True)
class CausalForest:
    forest: TreeEnsemble
    cfg: CfConfig
    z: np.ndarray
    wres: np.ndarray
    yres: np.ndarray
    weight: np.ndarray
    arm: np.ndarray
    cluster_id: np.ndarray
    m_hat: np.ndarray
    tree_clusters: list
    structure_rows: list
    estimation_rows: list
    warnings: int = 0

    def _moments(self):
        nodes = self.forest.apply(self.z)
        flat = np.concatenate(self.estimation_rows).astype(np.int64)
        off = np.zeros(len(self.estimation_rows) + 1, dtype=np.int64)
        off[1:] = np.cumsum([len(r) for r in self.estimation_rows])
        cap = self.forest.feature.shape[1]
        return _leaf_moments(nodes, flat, off, self.wres, self.yres, self.weight, self.arm, cap)

    def predict(self, z=None, oob: bool | None = None, level: float = 0.95) -> CateEstimate:
        """CATE with normal-theory intervals from the little-bags variance.

        With ``z`` omitted the training units are predicted out of bag: only
        trees whose cluster subsample excluded the unit's cluster are used.
        """
        if z is None:
            zq = self.z
            oob = True if oob is None else oob
        else:
            zq = np.ascontiguousarray(np.atleast_2d(np.asarray(z, dtype=np.float64)))
            oob = False
        T = self.forest.n_trees
        qnodes = self.forest.apply(zq)
        if oob:
            use = np.ones((T, zq.shape[0]), dtype=np.bool_)
            for b, cl in enumerate(self.tree_clusters):
                use[b] = ~np.isin(self.cluster_id, cl)
        else:
            use = np.ones((T, zq.shape[0]), dtype=np.bool_)
        sw, swy, sww, nt, nc = self._moments()
        tau, vb, gn, ng, dropped = _forest_solve(qnodes, sw, swy, sww, nt, nc, use, self.cfg.ci_group_size)
        var = bayes_debias(vb, gn, ng)
        bad = ~np.isfinite(tau)
        if bad.any():
            warnings.warn(f"{int(bad.sum())} queries had no usable trees", RuntimeWarning, stacklevel=2)
            tau = np.where(bad, 0.0, tau)
            var = np.where(bad, np.inf, var)
        zc = norm.ppf(0.5 + level / 2)
        half = zc * np.sqrt(var)
        return CateEstimate(
            tau, tau - half, tau + half, method="cf", extras={"variance": var, "dropped_trees": dropped}
        )


def _nuisance_oob(z, y, cid, I, cfg, rng):
    """Cluster-level out-of-bag (or cross-fitted) regression forest predictions of ``E[Y | Z]``."""
    n = z.shape[0]
    members = [np.flatnonzero(cid == c) for c in range(I)]
    if cfg.nuisance == "crossfit":
        folds = rng.permutation(I) % 4
        out = np.zeros(n)
        for f in range(4):
            train_cl = np.flatnonzero(folds != f)
            test_rows = np.flatnonzero(np.isin(cid, np.flatnonzero(folds == f)))
            pool = np.concatenate([members[c] for c in train_cl])
            blocks = [rng.choice(pool, pool.size, replace=True) for _ in range(cfg.nuisance_trees)]
            fr = grow_forest(z, y, blocks, None, cfg.min_node, _resolve_mtry(None, z.shape[1]), kernel_seed(rng))
            out[test_rows] = fr.predict(z[test_rows])
        return out, None
    k = max(1, int(math.floor(cfg.subsample_rate * I)))
    clusters = [np.sort(rng.choice(I, k, replace=False)) for _ in range(cfg.nuisance_trees)]
    blocks = [np.concatenate([members[c] for c in cl]) for cl in clusters]
    fr = grow_forest(z, y, blocks, None, cfg.min_node, _resolve_mtry(None, z.shape[1]), kernel_seed(rng))
    nodes = fr.apply(z)
    vals = np.take_along_axis(fr.value, nodes, axis=1)
    mask = np.ones((cfg.nuisance_trees, n), dtype=bool)
    for b, cl in enumerate(clusters):
        mask[b, np.isin(cid, cl)] = False
    cnt = mask.sum(axis=0)
    pred = np.where(cnt > 0, (vals * mask).sum(axis=0) / np.maximum(cnt, 1), float(np.mean(y)))
    return pred, clusters


def fit_causal_forest(data: ClusteredDataset, cfg: CfConfig | None = None, seed=None) -> CausalForest:
    """Honest causal forest with cluster subsampling and residual-on-residual leaves."""
    cfg = cfg or CfConfig()
    rng = as_generator(seed)
    z = np.ascontiguousarray(data.covariates())
    y = np.asarray(data.outcome, dtype=np.float64)
    cid = data.cluster_id
    I = data.n_clusters
    arm = np.asarray(data.treatment, dtype=np.int64)
    m_hat, _ = _nuisance_oob(z, y, cid, I, cfg, rng)
    yres = y - m_hat
    wres = arm - cfg.propensity
    weight = 1.0 / data.cluster_sizes[cid] if cfg.cluster_weighted else np.ones(data.n)
    members = [np.flatnonzero(cid == c) for c in range(I)]
    half = max(2, int(math.floor(cfg.subsample_rate * I)))
    G = cfg.n_trees // cfg.ci_group_size
    tree_clusters, struct, est = [], [], []
    for g in range(G):
        bag = rng.choice(I, half, replace=False)
        for h in range(cfg.ci_group_size):
            shuffled = rng.permutation(bag)
            n_struct = min(max(1, int(round(cfg.honesty_fraction * half))), half - 1)
            s_cl, e_cl = np.sort(shuffled[:n_struct]), np.sort(shuffled[n_struct:])
            tree_clusters.append(np.sort(bag))
            struct.append(np.concatenate([members[c] for c in s_cl]))
            est.append(np.concatenate([members[c] for c in e_cl]))
    p = z.shape[1]
    mtry = p if cfg.mtry is None else int(cfg.mtry)
    forest = grow_forest(
        z, yres, struct, None, cfg.min_node, mtry, kernel_seed(rng),
        treatment_residual=wres, arm=arm, min_arm_frac=cfg.imbalance,
    )
    return CausalForest(forest, cfg, z, wres.astype(np.float64), yres, weight, arm, cid, m_hat, tree_clusters, struct, est)
