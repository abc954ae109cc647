"""Random-intercept BART.

The model is ``Y_ij = f(x_ij, v_i, a_i) + b_i + e_ij`` with a sum-of-trees
prior on ``f``, ``b_i ~ N(0, sigma_b2)`` and ``e_ij ~ N(0, sigma2)``.  The
sampler is Bayesian backfitting: each tree is updated in turn against the
partial residual by a grow/prune/change Metropolis-Hastings step on its
structure (leaf values integrated out) followed by a conjugate draw of its
leaf values.  Cluster intercepts and both variances have conjugate full
conditionals.

The compiled kernels below take an explicit per-row ``basis`` so the same
forest update serves plain BART (basis 1) and the treatment-effect forest of
the multilevel causal forest (basis ``A - pi``).

Covariates are discretised once into cut indices: row ``i`` goes left at a
node with rule ``(j, c)`` iff ``xb[i, j] <= c``, which is the same as
``x[i, j] <= cuts[j][c]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numba as nb
import numpy as np
from scipy import stats

from .data import CateEstimate, ClusteredDataset
from .errors import DomainError
from .rng import as_generator, kernel_seed

__all__ = [
    "BartConfig",
    "PosteriorDraws",
    "fit_ribart",
    "fit_bart",
    "cate_from_draws",
    "dart_split_prior_update",
    "intercept_conditional",
    "make_cuts",
    "bin_covariates",
    "split_rhat",
]

MOVE_PROBS = (0.28, 0.28, 0.44)  # grow, prune, change
NODE_CAP = 256


@dataclass(frozen=True)
class BartConfig:
    n_trees: int = 200
    burn_in: int = 5000
    n_draws: int = 5000
    alpha: float = 0.95
    beta: float = 2.0
    leaf_prior_k: float = 2.0
    sigma2_df: float = 3.0
    sigma2_quantile: float = 0.90
    dart: bool = False
    thin: int = 1
    n_chains: int = 1
    max_cuts: int = 100
    max_depth: int = 12
    # Pinning variance components is for degenerate-case checks only.
    fix_sigma_b2: float | None = None
    fix_sigma2: float | None = None

    def __post_init__(self):
        if self.n_trees < 1:
            raise DomainError("n_trees must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise DomainError("alpha must lie in (0, 1)")
        if self.beta < 0:
            raise DomainError("beta must be >= 0")
        if self.burn_in < 0 or self.n_draws < 1 or self.thin < 1 or self.n_chains < 1:
            raise DomainError("burn_in >= 0, n_draws >= 1, thin >= 1 and n_chains >= 1 are required")
        if self.leaf_prior_k <= 0 or self.sigma2_df <= 0 or not 0 < self.sigma2_quantile < 1:
            raise DomainError("invalid prior hyperparameters")

    @property
    def n_retained(self) -> int:
        return self.n_draws // self.thin

    def replace(self, **kw) -> "BartConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class PosteriorDraws:
    """Retained posterior draws on the original outcome scale.

    ``surface[s, i]`` is the fitted regression at unit ``i``'s observed arm and
    ``counterfactual[s, i]`` the same draw's fit with the arm flipped.
    """

    surface: np.ndarray
    counterfactual: np.ndarray
    intercepts: np.ndarray
    sigma_b2: np.ndarray
    sigma2: np.ndarray
    treatment: np.ndarray
    method: str = "ribart"
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if np.any(self.sigma2 <= 0) or np.any(self.sigma_b2 < 0):
            raise DomainError("variance draws must be positive")

    @property
    def n_draws(self) -> int:
        return int(self.surface.shape[0])

    def contrasts(self) -> np.ndarray:
        """Per-draw CATE, treated surface minus control surface, ``S x n``."""
        sign = np.where(self.treatment == 1, 1.0, -1.0)
        return (self.surface - self.counterfactual) * sign

    def to_csv(self, path: str | Path) -> None:
        """Long-format export with columns draw, unit, surface, counterfactual."""
        S, n = self.surface.shape
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["draw", "unit", "surface", "counterfactual"])
            for s in range(S):
                for i in range(n):
                    w.writerow([s, i, repr(float(self.surface[s, i])), repr(float(self.counterfactual[s, i]))])


# ---------------------------------------------------------------- discretisation


def make_cuts(x: np.ndarray, max_cuts: int = 100) -> list[np.ndarray]:
    """Candidate thresholds per column: midpoints of distinct values, thinned to ``max_cuts``."""
    out = []
    for j in range(x.shape[1]):
        u = np.unique(x[:, j])
        mids = 0.5 * (u[:-1] + u[1:])
        if mids.shape[0] > max_cuts:
            idx = np.round(np.linspace(0, mids.shape[0] - 1, max_cuts)).astype(np.int64)
            mids = mids[np.unique(idx)]
        out.append(mids)
    return out


def bin_covariates(x: np.ndarray, cuts: list[np.ndarray]) -> np.ndarray:
    xb = np.empty(x.shape, dtype=np.int64)
    for j, c in enumerate(cuts):
        xb[:, j] = np.searchsorted(c, x[:, j], side="left")
    return np.ascontiguousarray(xb)


# ---------------------------------------------------------------- compiled kernels


@nb.njit(cache=True)
def _seed(s):
    np.random.seed(s)


@nb.njit(cache=True)
def _leaf_loglik(sw2, swr, sigma2, tau2):
    d = sigma2 + tau2 * sw2
    return 0.5 * np.log(sigma2 / d) + tau2 * swr * swr / (2.0 * sigma2 * d)


@nb.njit(cache=True)
def _ranges(var, cut, left, parent, node, ncut, lo, hi):
    for j in range(ncut.shape[0]):
        lo[j] = 0
        hi[j] = ncut[j] - 1
    ch = node
    par = parent[node]
    while par >= 0:
        v = var[par]
        c = cut[par]
        if left[par] == ch:
            if c - 1 < hi[v]:
                hi[v] = c - 1
        else:
            if c + 1 > lo[v]:
                lo[v] = c + 1
        ch = par
        par = parent[par]


@nb.njit(cache=True)
def _choose_rule(lo, hi, s):
    """Draw a split variable proportional to ``s`` among admissible ones, then a uniform cut."""
    tot = 0.0
    for j in range(lo.shape[0]):
        if lo[j] <= hi[j]:
            tot += s[j]
    if tot <= 0.0:
        return -1, -1
    u = np.random.random() * tot
    acc = 0.0
    v = -1
    for j in range(lo.shape[0]):
        if lo[j] <= hi[j]:
            acc += s[j]
            v = j
            if u < acc:
                break
    c = lo[v] + np.random.randint(hi[v] - lo[v] + 1)
    return v, c


@nb.njit(cache=True)
def _p_split(alpha, beta, d, admissible, max_depth):
    if not admissible or d >= max_depth:
        return 0.0
    return alpha * (1.0 + d) ** (-beta)


@nb.njit(cache=True)
def _child_admissible(lo, hi, v, c):
    """Whether the left and right children of rule ``(v, c)`` still have any admissible split."""
    other = False
    for j in range(lo.shape[0]):
        if j != v and lo[j] <= hi[j]:
            other = True
            break
    return other or c - 1 >= lo[v], other or c + 1 <= hi[v]


@nb.njit(cache=True)
def _update_tree(
    var, cut, left, right, parent, depth, alive, mu,
    leaf_of, leaf_of_aux, xb, xb_aux, ncut, r, w,
    sigma2, tau2, alpha, beta, s, max_depth, lo, hi, stats_n, stats_w2, stats_wr,
):
    """One MH structure move and a conjugate leaf refresh for a single tree.

    Returns the move code (0 grow, 1 prune, 2 change) and whether it was accepted.
    """
    n = r.shape[0]
    cap = var.shape[0]
    pg, pp, _ = 0.28, 0.28, 0.44
    n_leaves = 0
    n_nog = 0
    for k in range(cap):
        if alive[k]:
            if var[k] < 0:
                n_leaves += 1
            elif var[left[k]] < 0 and var[right[k]] < 0:
                n_nog += 1
    u = np.random.random()
    if n_leaves == 1:
        move = 0
    elif u < pg:
        move = 0
    elif u < pg + pp:
        move = 1
    else:
        move = 2
    accepted = False

    if move == 0:
        pick = np.random.randint(n_leaves)
        eta = -1
        for k in range(cap):
            if alive[k] and var[k] < 0:
                if pick == 0:
                    eta = k
                    break
                pick -= 1
        d = depth[eta]
        _ranges(var, cut, left, parent, eta, ncut, lo, hi)
        v, c = _choose_rule(lo, hi, s)
        # two free slots are needed for the children
        f1 = -1
        f2 = -1
        for k in range(cap):
            if not alive[k]:
                if f1 < 0:
                    f1 = k
                else:
                    f2 = k
                    break
        if v >= 0 and d < max_depth and f2 >= 0:
            nl = 0
            nr = 0
            wl2 = 0.0
            wlr = 0.0
            wr2 = 0.0
            wrr = 0.0
            for i in range(n):
                if leaf_of[i] == eta:
                    if xb[i, v] <= c:
                        nl += 1
                        wl2 += w[i] * w[i]
                        wlr += w[i] * r[i]
                    else:
                        nr += 1
                        wr2 += w[i] * w[i]
                        wrr += w[i] * r[i]
            if nl > 0 and nr > 0:
                adm_l, adm_r = _child_admissible(lo, hi, v, c)
                ps = _p_split(alpha, beta, d, True, max_depth)
                pl = _p_split(alpha, beta, d + 1, adm_l, max_depth)
                pr = _p_split(alpha, beta, d + 1, adm_r, max_depth)
                par = parent[eta]
                parent_was_nog = False
                if par >= 0:
                    sib = right[par] if left[par] == eta else left[par]
                    parent_was_nog = var[sib] < 0
                nog_new = n_nog + 1 - (1 if parent_was_nog else 0)
                p_grow_t = 1.0 if n_leaves == 1 else pg
                log_r = (
                    _leaf_loglik(wl2, wlr, sigma2, tau2)
                    + _leaf_loglik(wr2, wrr, sigma2, tau2)
                    - _leaf_loglik(wl2 + wr2, wlr + wrr, sigma2, tau2)
                    + np.log(ps) + np.log(1.0 - pl) + np.log(1.0 - pr) - np.log(1.0 - ps)
                    + np.log(pp) - np.log(nog_new) - np.log(p_grow_t) + np.log(n_leaves)
                )
                if np.log(np.random.random()) < log_r:
                    accepted = True
                    var[eta] = v
                    cut[eta] = c
                    left[eta] = f1
                    right[eta] = f2
                    for ch in (f1, f2):
                        alive[ch] = True
                        var[ch] = -1
                        parent[ch] = eta
                        depth[ch] = d + 1
                        left[ch] = -1
                        right[ch] = -1
                    for i in range(n):
                        if leaf_of[i] == eta:
                            leaf_of[i] = f1 if xb[i, v] <= c else f2
                    for i in range(leaf_of_aux.shape[0]):
                        if leaf_of_aux[i] == eta:
                            leaf_of_aux[i] = f1 if xb_aux[i, v] <= c else f2
    else:
        pick = np.random.randint(n_nog)
        eta = -1
        for k in range(cap):
            if alive[k] and var[k] >= 0 and var[left[k]] < 0 and var[right[k]] < 0:
                if pick == 0:
                    eta = k
                    break
                pick -= 1
        l = left[eta]
        rr = right[eta]
        d = depth[eta]
        _ranges(var, cut, left, parent, eta, ncut, lo, hi)
        if move == 1:
            nl = 0
            wl2 = 0.0
            wlr = 0.0
            wr2 = 0.0
            wrr = 0.0
            for i in range(n):
                if leaf_of[i] == l:
                    wl2 += w[i] * w[i]
                    wlr += w[i] * r[i]
                elif leaf_of[i] == rr:
                    wr2 += w[i] * w[i]
                    wrr += w[i] * r[i]
            adm_l, adm_r = _child_admissible(lo, hi, var[eta], cut[eta])
            ps = _p_split(alpha, beta, d, True, max_depth)
            pl = _p_split(alpha, beta, d + 1, adm_l, max_depth)
            pr = _p_split(alpha, beta, d + 1, adm_r, max_depth)
            p_grow_after = 1.0 if n_leaves == 2 else pg
            log_r = -(
                _leaf_loglik(wl2, wlr, sigma2, tau2)
                + _leaf_loglik(wr2, wrr, sigma2, tau2)
                - _leaf_loglik(wl2 + wr2, wlr + wrr, sigma2, tau2)
                + np.log(ps) + np.log(1.0 - pl) + np.log(1.0 - pr) - np.log(1.0 - ps)
                + np.log(pp) - np.log(n_nog) - np.log(p_grow_after) + np.log(n_leaves - 1)
            )
            if np.log(np.random.random()) < log_r:
                accepted = True
                alive[l] = False
                alive[rr] = False
                var[eta] = -1
                cut[eta] = -1
                left[eta] = -1
                right[eta] = -1
                for i in range(n):
                    if leaf_of[i] == l or leaf_of[i] == rr:
                        leaf_of[i] = eta
                for i in range(leaf_of_aux.shape[0]):
                    if leaf_of_aux[i] == l or leaf_of_aux[i] == rr:
                        leaf_of_aux[i] = eta
        else:
            v, c = _choose_rule(lo, hi, s)
            ov = var[eta]
            oc = cut[eta]
            onl2 = 0.0
            onlr = 0.0
            onr2 = 0.0
            onrr = 0.0
            nl = 0
            nr = 0
            wl2 = 0.0
            wlr = 0.0
            wr2 = 0.0
            wrr = 0.0
            for i in range(n):
                if leaf_of[i] == l or leaf_of[i] == rr:
                    if leaf_of[i] == l:
                        onl2 += w[i] * w[i]
                        onlr += w[i] * r[i]
                    else:
                        onr2 += w[i] * w[i]
                        onrr += w[i] * r[i]
                    if xb[i, v] <= c:
                        nl += 1
                        wl2 += w[i] * w[i]
                        wlr += w[i] * r[i]
                    else:
                        nr += 1
                        wr2 += w[i] * w[i]
                        wrr += w[i] * r[i]
            if nl > 0 and nr > 0 and not (v == ov and c == oc):
                a_l, a_r = _child_admissible(lo, hi, v, c)
                o_l, o_r = _child_admissible(lo, hi, ov, oc)
                log_r = (
                    _leaf_loglik(wl2, wlr, sigma2, tau2) + _leaf_loglik(wr2, wrr, sigma2, tau2)
                    - _leaf_loglik(onl2, onlr, sigma2, tau2) - _leaf_loglik(onr2, onrr, sigma2, tau2)
                    + np.log(1.0 - _p_split(alpha, beta, d + 1, a_l, max_depth))
                    + np.log(1.0 - _p_split(alpha, beta, d + 1, a_r, max_depth))
                    - np.log(1.0 - _p_split(alpha, beta, d + 1, o_l, max_depth))
                    - np.log(1.0 - _p_split(alpha, beta, d + 1, o_r, max_depth))
                )
                if np.log(np.random.random()) < log_r:
                    accepted = True
                    var[eta] = v
                    cut[eta] = c
                    for i in range(n):
                        if leaf_of[i] == l or leaf_of[i] == rr:
                            leaf_of[i] = l if xb[i, v] <= c else rr
                    for i in range(leaf_of_aux.shape[0]):
                        if leaf_of_aux[i] == l or leaf_of_aux[i] == rr:
                            leaf_of_aux[i] = l if xb_aux[i, v] <= c else rr

    # conjugate leaf values
    for k in range(cap):
        stats_n[k] = 0
        stats_w2[k] = 0.0
        stats_wr[k] = 0.0
    for i in range(n):
        k = leaf_of[i]
        stats_n[k] += 1
        stats_w2[k] += w[i] * w[i]
        stats_wr[k] += w[i] * r[i]
    for k in range(cap):
        if alive[k] and var[k] < 0:
            pv = 1.0 / (1.0 / tau2 + stats_w2[k] / sigma2)
            mu[k] = pv * stats_wr[k] / sigma2 + np.sqrt(pv) * np.random.normal()
    return move, accepted


@nb.njit(cache=True)
def _update_forest(
    var, cut, left, right, parent, depth, alive, mu, leaf_of, leaf_of_aux,
    xb, xb_aux, ncut, target, w, fit, sigma2, tau2, alpha, beta, s, max_depth,
    lo, hi, stats_n, stats_w2, stats_wr, r,
):
    """Backfit every tree of a forest against ``target``; ``fit`` is updated in place."""
    K = var.shape[0]
    n = target.shape[0]
    for k in range(K):
        for i in range(n):
            c_old = w[i] * mu[k, leaf_of[k, i]]
            fit[i] -= c_old
            r[i] = target[i] - fit[i]
        _update_tree(
            var[k], cut[k], left[k], right[k], parent[k], depth[k], alive[k], mu[k],
            leaf_of[k], leaf_of_aux[k], xb, xb_aux, ncut, r, w,
            sigma2, tau2, alpha, beta, s, max_depth, lo, hi, stats_n, stats_w2, stats_wr,
        )
        for i in range(n):
            fit[i] += w[i] * mu[k, leaf_of[k, i]]


@nb.njit(cache=True)
def _forest_eval(mu, leaf_of, w, out):
    K = mu.shape[0]
    m = out.shape[0]
    for i in range(m):
        out[i] = 0.0
    for k in range(K):
        for i in range(m):
            out[i] += mu[k, leaf_of[k, i]]
    for i in range(m):
        out[i] *= w[i]


@nb.njit(cache=True)
def _forest_stats(var, alive, depth, counts):
    """Accumulate split-variable use into ``counts``; return the mean tree depth."""
    K = var.shape[0]
    tot = 0.0
    for j in range(counts.shape[0]):
        counts[j] = 0.0
    for k in range(K):
        dmax = 0
        for q in range(var.shape[1]):
            if alive[k, q]:
                if var[k, q] >= 0:
                    counts[var[k, q]] += 1.0
                elif depth[k, q] > dmax:
                    dmax = depth[k, q]
        tot += dmax
    return tot / K


@nb.njit(cache=True)
def _intercept_moments(s, cnt, sigma_b2, sigma2, mean, var):
    """Conditional moments of ``b_i`` given the residual sums ``s`` and counts ``cnt``."""
    for i in range(s.shape[0]):
        if sigma_b2 <= 0.0:
            mean[i] = 0.0
            var[i] = 0.0
            continue
        prec = 1.0 / sigma_b2 + cnt[i] / sigma2
        var[i] = 1.0 / prec
        mean[i] = var[i] * s[i] / sigma2


@nb.njit(cache=True)
def _log_gamma_draw(shape):
    if shape >= 1.0:
        return np.log(np.random.gamma(shape, 1.0))
    return np.log(np.random.gamma(shape + 1.0, 1.0)) + np.log(np.random.random()) / shape


@nb.njit(cache=True)
def _dirichlet_log(conc, out):
    m = -np.inf
    for j in range(conc.shape[0]):
        out[j] = _log_gamma_draw(conc[j])
        if out[j] > m:
            m = out[j]
    t = 0.0
    for j in range(conc.shape[0]):
        t += np.exp(out[j] - m)
    lt = m + np.log(t)
    for j in range(conc.shape[0]):
        out[j] -= lt


@nb.njit(cache=True)
def _dart_alpha_draw(log_s, grid_lam):
    """Grid draw of the Dirichlet concentration given log split probabilities.

    The prior is ``alpha / (alpha + P) ~ Beta(0.5, 1)``.
    """
    P = log_s.shape[0]
    G = grid_lam.shape[0]
    lw = np.empty(G)
    sls = 0.0
    for j in range(P):
        sls += log_s[j]
    mx = -np.inf
    for g in range(G):
        lam = grid_lam[g]
        a = P * lam / (1.0 - lam)
        lw[g] = math.lgamma(a) - P * math.lgamma(a / P) + (a / P - 1.0) * sls - 0.5 * np.log(lam)
        if lw[g] > mx:
            mx = lw[g]
    tot = 0.0
    for g in range(G):
        lw[g] = np.exp(lw[g] - mx)
        tot += lw[g]
    u = np.random.random() * tot
    acc = 0.0
    for g in range(G):
        acc += lw[g]
        if u < acc:
            return P * grid_lam[g] / (1.0 - grid_lam[g])
    return P * grid_lam[G - 1] / (1.0 - grid_lam[G - 1])


def _new_forest(K, n, m, init_mu=0.0):
    cap = NODE_CAP
    st = dict(
        var=np.full((K, cap), -1, dtype=np.int64),
        cut=np.full((K, cap), -1, dtype=np.int64),
        left=np.full((K, cap), -1, dtype=np.int64),
        right=np.full((K, cap), -1, dtype=np.int64),
        parent=np.full((K, cap), -1, dtype=np.int64),
        depth=np.zeros((K, cap), dtype=np.int64),
        alive=np.zeros((K, cap), dtype=np.bool_),
        mu=np.zeros((K, cap)),
        leaf_of=np.zeros((K, n), dtype=np.int64),
        leaf_of_aux=np.zeros((K, max(m, 1)), dtype=np.int64),
    )
    st["alive"][:, 0] = True
    st["mu"][:, 0] = init_mu
    return st


@nb.njit(cache=True)
def _run_chain(
    y, cid, n_clusters, w_tau, forests_xb, forests_xb_aux, ncut_mu, ncut_tau,
    mv, mc, ml, mr, mp, md, ma, mm, mlo, mla,
    tv, tc, tl, tr, tp, td, ta, tm, tlo, tla,
    n_tau_trees, tau2_mu, tau2_tau, alpha_mu, beta_mu, alpha_tau, beta_tau, max_depth,
    nu, lam, sb_a, sb_b, sigma2_init, sigma_b2_init, fix_sb2, fix_s2,
    burn, n_keep, thin, dart, seed,
    out_fit_mu, out_fit_mu_aux, out_tau, out_b, out_sb2, out_s2, out_depth_mu, out_depth_tau,
):
    """Full Gibbs sweep loop for one chain (riBART when ``n_tau_trees == 0``)."""
    np.random.seed(seed)
    n = y.shape[0]
    xb_mu = forests_xb[0]
    xb_mu_aux = forests_xb_aux[0]
    xb_tau = forests_xb[1]
    xb_tau_aux = forests_xb_aux[1]
    p_mu = ncut_mu.shape[0]
    ones = np.ones(n)
    ones_aux = np.ones(xb_mu_aux.shape[0])
    fit_mu = np.zeros(n)
    fit_tau = np.zeros(n)
    target = np.zeros(n)
    r = np.zeros(n)
    cap = mv.shape[1]
    stats_n = np.zeros(cap, dtype=np.int64)
    stats_w2 = np.zeros(cap)
    stats_wr = np.zeros(cap)
    lo = np.zeros(max(p_mu, ncut_tau.shape[0]), dtype=np.int64)
    hi = np.zeros(max(p_mu, ncut_tau.shape[0]), dtype=np.int64)
    lo_mu = lo[:p_mu]
    hi_mu = hi[:p_mu]
    lo_tau = lo[:ncut_tau.shape[0]]
    hi_tau = hi[:ncut_tau.shape[0]]
    s_mu = np.full(p_mu, 1.0 / p_mu)
    s_tau = np.full(ncut_tau.shape[0], 1.0 / max(ncut_tau.shape[0], 1))
    log_s = np.empty(p_mu)
    counts = np.zeros(p_mu)
    counts_tau = np.zeros(ncut_tau.shape[0])
    conc = np.empty(p_mu)
    dart_a = 1.0
    grid = (np.arange(1000) + 0.5) / 1000.0
    b = np.zeros(n_clusters)
    bsum = np.zeros(n_clusters)
    cnt = np.zeros(n_clusters)
    bmean = np.zeros(n_clusters)
    bvar = np.zeros(n_clusters)
    for i in range(n):
        cnt[cid[i]] += 1.0
    sigma2 = sigma2_init if fix_s2 <= 0 else fix_s2
    sigma_b2 = sigma_b2_init if fix_sb2 < 0 else fix_sb2
    total = burn + n_keep * thin
    keep = 0
    for it in range(total):
        for i in range(n):
            target[i] = y[i] - b[cid[i]] - fit_tau[i]
        _update_forest(
            mv, mc, ml, mr, mp, md, ma, mm, mlo, mla, xb_mu, xb_mu_aux, ncut_mu, target, ones, fit_mu,
            sigma2, tau2_mu, alpha_mu, beta_mu, s_mu, max_depth, lo_mu, hi_mu, stats_n, stats_w2, stats_wr, r,
        )
        if n_tau_trees > 0:
            for i in range(n):
                target[i] = y[i] - b[cid[i]] - fit_mu[i]
            _update_forest(
                tv, tc, tl, tr, tp, td, ta, tm, tlo, tla, xb_tau, xb_tau_aux, ncut_tau, target, w_tau, fit_tau,
                sigma2, tau2_tau, alpha_tau, beta_tau, s_tau, max_depth, lo_tau, hi_tau, stats_n, stats_w2, stats_wr, r,
            )
        # cluster intercepts
        for c in range(n_clusters):
            bsum[c] = 0.0
        for i in range(n):
            bsum[cid[i]] += y[i] - fit_mu[i] - fit_tau[i]
        _intercept_moments(bsum, cnt, sigma_b2, sigma2, bmean, bvar)
        for c in range(n_clusters):
            b[c] = bmean[c] + np.sqrt(bvar[c]) * np.random.normal()
        # error variance
        if fix_s2 <= 0:
            ssr = 0.0
            for i in range(n):
                e = y[i] - fit_mu[i] - fit_tau[i] - b[cid[i]]
                ssr += e * e
            sigma2 = (nu * lam + ssr) / (2.0 * np.random.gamma(0.5 * (nu + n), 1.0))
        # intercept variance
        if fix_sb2 < 0:
            sb = 0.0
            for c in range(n_clusters):
                sb += b[c] * b[c]
            sigma_b2 = (sb_b + 0.5 * sb) / np.random.gamma(sb_a + 0.5 * n_clusters, 1.0)
        dmu = _forest_stats(mv, ma, md, counts)
        if dart and it >= burn // 2:
            for j in range(p_mu):
                conc[j] = dart_a / p_mu + counts[j]
            _dirichlet_log(conc, log_s)
            t = 0.0
            for j in range(p_mu):
                s_mu[j] = np.exp(log_s[j])
                t += s_mu[j]
            for j in range(p_mu):
                s_mu[j] /= t
            dart_a = _dart_alpha_draw(log_s, grid)
        if it >= burn and (it - burn) % thin == thin - 1:
            out_fit_mu[keep] = fit_mu
            _forest_eval(mm, mla, ones_aux, out_fit_mu_aux[keep])
            if n_tau_trees > 0:
                for i in range(n):
                    out_tau[keep, i] = fit_tau[i] / w_tau[i]
                out_depth_tau[keep] = _forest_stats(tv, ta, td, counts_tau)
            out_b[keep] = b
            out_sb2[keep] = sigma_b2
            out_s2[keep] = sigma2
            out_depth_mu[keep] = dmu
            keep += 1
    return s_mu


@nb.njit(cache=True)
def _tree_chain(xb, ncut, r, sigma2, tau2, alpha, beta, max_depth, n_iter, seed):
    """Structure-only chain of a single tree on fixed residuals.

    Records the leaf count and root rule per iteration; used to check the
    move kernel against exhaustive enumeration of the tree posterior.
    """
    np.random.seed(seed)
    n = r.shape[0]
    p = ncut.shape[0]
    cap = NODE_CAP
    var = np.full(cap, -1, dtype=np.int64)
    cut = np.full(cap, -1, dtype=np.int64)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    parent = np.full(cap, -1, dtype=np.int64)
    depth = np.zeros(cap, dtype=np.int64)
    alive = np.zeros(cap, dtype=np.bool_)
    alive[0] = True
    mu = np.zeros(cap)
    leaf_of = np.zeros(n, dtype=np.int64)
    leaf_aux = np.zeros(1, dtype=np.int64)
    xb_aux = np.zeros((1, p), dtype=np.int64)
    w = np.ones(n)
    s = np.full(p, 1.0 / p)
    lo = np.zeros(p, dtype=np.int64)
    hi = np.zeros(p, dtype=np.int64)
    sn = np.zeros(cap, dtype=np.int64)
    s2 = np.zeros(cap)
    sr = np.zeros(cap)
    n_leaves = np.zeros(n_iter, dtype=np.int64)
    root = np.zeros((n_iter, 2), dtype=np.int64)
    for it in range(n_iter):
        _update_tree(
            var, cut, left, right, parent, depth, alive, mu, leaf_of, leaf_aux, xb, xb_aux, ncut, r, w,
            sigma2, tau2, alpha, beta, s, max_depth, lo, hi, sn, s2, sr,
        )
        c = 0
        for k in range(cap):
            if alive[k] and var[k] < 0:
                c += 1
        n_leaves[it] = c
        root[it, 0] = var[0]
        root[it, 1] = cut[0]
    return n_leaves, root


# ---------------------------------------------------------------- python surface


def intercept_conditional(residuals, cluster_id, n_clusters, sigma_b2, sigma2):
    """Mean and variance of each ``b_i`` given trees, i.e. given the residuals ``y - f``."""
    r = np.asarray(residuals, dtype=np.float64)
    cid = np.asarray(cluster_id, dtype=np.int64)
    s = np.bincount(cid, weights=r, minlength=n_clusters).astype(np.float64)
    cnt = np.bincount(cid, minlength=n_clusters).astype(np.float64)
    mean = np.zeros(n_clusters)
    var = np.zeros(n_clusters)
    _intercept_moments(s, cnt, float(sigma_b2), float(sigma2), mean, var)
    return mean, var


def dart_split_prior_update(feature_counts, dirichlet_alpha: float, rng=None) -> np.ndarray:
    """Draw split probabilities from ``Dirichlet(alpha/P + counts)``.

    Sampling is done in log space so tiny concentrations do not underflow.
    """
    counts = np.asarray(feature_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise DomainError("feature counts must be nonnegative")
    rng = as_generator(rng)
    conc = dirichlet_alpha / counts.shape[0] + counts
    g = np.where(conc >= 1.0, np.log(rng.gamma(np.maximum(conc, 1.0))), 0.0)
    small = conc < 1.0
    if small.any():
        g[small] = np.log(rng.gamma(conc[small] + 1.0)) + np.log(rng.random(small.sum())) / conc[small]
    log_p = g - np.logaddexp.reduce(g)
    p = np.exp(log_p)
    return p / p.sum()


def _ols_sigma2(x, y):
    n, p = x.shape
    if n <= p + 1:
        return float(np.var(y))
    design = np.hstack([np.ones((n, 1)), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    res = y - design @ coef
    return float(res @ res / (n - p - 1))


def _prep_outcome(y):
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise DomainError("outcome contains non-finite values")
    lo, hi = float(y.min()), float(y.max())
    mid = 0.5 * (lo + hi)
    span = hi - lo if hi > lo else 1.0
    return (y - mid) / span, mid, span


def _priors(cfg, x, ys, cid, n_clusters):
    s2hat = max(_ols_sigma2(x, ys), 1e-8)
    q = stats.chi2.ppf(1.0 - cfg.sigma2_quantile, cfg.sigma2_df)
    lam = s2hat * q / cfg.sigma2_df
    cm = np.bincount(cid, weights=ys, minlength=n_clusters) / np.maximum(np.bincount(cid, minlength=n_clusters), 1)
    vcm = float(np.var(cm)) if n_clusters > 1 else 0.0
    sb_b = max(0.5 * vcm, 1e-6)
    return s2hat, lam, 1.0, sb_b


def split_rhat(chains: np.ndarray) -> float:
    """Split-R-hat of a scalar quantity from an ``(n_chains, S)`` array."""
    chains = np.asarray(chains, dtype=np.float64)
    half = chains.shape[1] // 2
    if half < 2:
        return float("nan")
    parts = np.vstack([chains[:, :half], chains[:, half:2 * half]])
    m, L = parts.shape
    means = parts.mean(axis=1)
    W = parts.var(axis=1, ddof=1).mean()
    B = L * means.var(ddof=1)
    if W <= 0:
        return float("nan")
    return float(np.sqrt(((L - 1) / L * W + B / L) / W))


def _sample(
    y_scaled, cid, n_clusters, x_mu, x_mu_aux, x_tau, w_tau, cfg_mu: BartConfig,
    tau_trees: int, tau_sd: float, tau_alpha: float, tau_beta: float, seed_rng, lam, s2hat, sb_a, sb_b,
):
    n = y_scaled.shape[0]
    cuts_mu = make_cuts(x_mu, cfg_mu.max_cuts)
    xb_mu = bin_covariates(x_mu, cuts_mu)
    xb_mu_aux = bin_covariates(x_mu_aux, cuts_mu)
    ncut_mu = np.array([len(c) for c in cuts_mu], dtype=np.int64)
    if x_tau is None:
        x_tau = np.zeros((n, 1))
    cuts_tau = make_cuts(x_tau, cfg_mu.max_cuts)
    xb_tau = bin_covariates(x_tau, cuts_tau)
    ncut_tau = np.array([len(c) for c in cuts_tau], dtype=np.int64)
    K = cfg_mu.n_trees
    tau2_mu = (0.5 / (cfg_mu.leaf_prior_k * math.sqrt(K))) ** 2
    S = cfg_mu.n_retained
    fix_sb2 = -1.0 if cfg_mu.fix_sigma_b2 is None else float(cfg_mu.fix_sigma_b2)
    fix_s2 = -1.0 if cfg_mu.fix_sigma2 is None else float(cfg_mu.fix_sigma2)
    res = []
    for ch in range(cfg_mu.n_chains):
        fm = _new_forest(K, n, xb_mu_aux.shape[0])
        ft = _new_forest(max(tau_trees, 1), n, 1)
        out = dict(
            fit_mu=np.zeros((S, n)), fit_mu_aux=np.zeros((S, xb_mu_aux.shape[0])), tau=np.zeros((S, n)),
            b=np.zeros((S, n_clusters)), sb2=np.zeros(S), s2=np.zeros(S), dmu=np.zeros(S), dtau=np.zeros(S),
        )
        s_final = _run_chain(
            y_scaled, cid, n_clusters, w_tau, (xb_mu, xb_tau), (xb_mu_aux, np.zeros((1, xb_tau.shape[1]), dtype=np.int64)),
            ncut_mu, ncut_tau,
            fm["var"], fm["cut"], fm["left"], fm["right"], fm["parent"], fm["depth"], fm["alive"], fm["mu"], fm["leaf_of"], fm["leaf_of_aux"],
            ft["var"], ft["cut"], ft["left"], ft["right"], ft["parent"], ft["depth"], ft["alive"], ft["mu"], ft["leaf_of"], ft["leaf_of_aux"],
            int(tau_trees), tau2_mu, tau_sd ** 2, cfg_mu.alpha, cfg_mu.beta, tau_alpha, tau_beta, int(cfg_mu.max_depth),
            cfg_mu.sigma2_df, lam, sb_a, sb_b, s2hat, sb_b, fix_sb2, fix_s2,
            int(cfg_mu.burn_in), S, int(cfg_mu.thin), bool(cfg_mu.dart), kernel_seed(seed_rng),
            out["fit_mu"], out["fit_mu_aux"], out["tau"], out["b"], out["sb2"], out["s2"], out["dmu"], out["dtau"],
        )
        out["split_probs"] = s_final
        res.append(out)
    return res


def _pool(res, key):
    return np.concatenate([r[key] for r in res], axis=0)


def fit_ribart(data: ClusteredDataset, cfg: BartConfig | None = None, seed=None) -> PosteriorDraws:
    """Random-intercept BART on the S-learner design ``[X, V, A]``."""
    cfg = cfg or BartConfig()
    rng = as_generator(seed)
    ys, mid, span = _prep_outcome(data.outcome)
    x = data.design()
    x_cf = data.design(1 - data.treatment)
    s2hat, lam, sb_a, sb_b = _priors(cfg, x, ys, data.cluster_id, data.n_clusters)
    if cfg.fix_sigma2 is not None:
        cfg = cfg.replace(fix_sigma2=cfg.fix_sigma2 / span**2)
    if cfg.fix_sigma_b2 is not None:
        cfg = cfg.replace(fix_sigma_b2=cfg.fix_sigma_b2 / span**2)
    res = _sample(
        ys, np.asarray(data.cluster_id, dtype=np.int64), data.n_clusters, x, x_cf, None, np.ones(data.n), cfg,
        0, 0.0, 0.5, 1.0, rng, lam, s2hat, sb_a, sb_b,
    )
    extras = {"mean_depth": _pool(res, "dmu"), "split_probs": res[0]["split_probs"]}
    if cfg.n_chains > 1:
        extras["rhat_sigma2"] = split_rhat(np.vstack([r["s2"] for r in res]))
    return PosteriorDraws(
        surface=_pool(res, "fit_mu") * span + mid,
        counterfactual=_pool(res, "fit_mu_aux") * span + mid,
        intercepts=_pool(res, "b") * span,
        sigma_b2=_pool(res, "sb2") * span**2,
        sigma2=_pool(res, "s2") * span**2,
        treatment=np.asarray(data.treatment).copy(),
        method="ribart",
        extras=extras,
    )


def fit_bart(x, y, cfg: BartConfig | None = None, seed=None) -> np.ndarray:
    """Plain BART posterior mean of the regression at the training rows."""
    cfg = cfg or BartConfig()
    rng = as_generator(seed)
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    ys, mid, span = _prep_outcome(y)
    n = ys.shape[0]
    cid = np.zeros(n, dtype=np.int64)
    s2hat, lam, sb_a, sb_b = _priors(cfg, x, ys, cid, 1)
    cfg = cfg.replace(fix_sigma_b2=0.0)
    res = _sample(ys, cid, 1, x, x[:1], None, np.ones(n), cfg, 0, 0.0, 0.5, 1.0, rng, lam, s2hat, sb_a, sb_b)
    return _pool(res, "fit_mu").mean(axis=0) * span + mid


def cate_from_draws(draws: PosteriorDraws, level: float = 0.95) -> CateEstimate:
    """Posterior mean and equal-tailed interval of each unit's contrast."""
    if not 0.0 < level < 1.0:
        raise DomainError("level must lie in (0, 1)")
    if draws.n_draws == 0:
        raise DomainError("no posterior draws")
    c = draws.contrasts()
    q = np.quantile(c, [(1 - level) / 2, (1 + level) / 2], axis=0)
    return CateEstimate.enclosing(c.mean(axis=0), q[0], q[1], method=draws.method, sd=c.std(axis=0))
