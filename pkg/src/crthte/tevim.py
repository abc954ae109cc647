"""Post-estimation summaries of fitted CATEs.

``tevim`` scores each covariate by how much worse the fitted CATEs are
predicted once that covariate is withheld from a projection regression.
``fit_the_fit`` summarises the CATEs by a shallow CART over a few selected
covariates, with posterior intervals for node means when draws exist.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .bart import BartConfig, fit_bart
from .errors import DomainError
from .rng import substream
from .tree import RegressionTree, grow_cart

__all__ = ["TevimResult", "SubgroupTree", "tevim", "knn_projection", "fit_the_fit", "PROJECTOR_DEFAULTS"]

PROJECTOR_DEFAULTS = BartConfig(n_trees=50, burn_in=500, n_draws=500)


@dataclass(frozen=True)
class TevimResult:
    names: tuple
    scores: np.ndarray
    contributions: np.ndarray  # n x P squared differences
    projector: dict = field(default_factory=dict)

    def ranking(self) -> list[str]:
        return [self.names[j] for j in np.argsort(-self.scores, kind="stable")]

    def top(self, k: int = 6) -> list[int]:
        return [int(j) for j in np.argsort(-self.scores, kind="stable")[:k]]

    def write(self, outdir: str | Path) -> None:
        outdir = Path(outdir)
        with open(outdir / "tevim.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["covariate", "score"])
            for name, s in zip(self.names, self.scores):
                w.writerow([name, repr(float(s))])
        with open(outdir / "tevim_contributions.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["unit", "covariate", "contribution"])
            for j, name in enumerate(self.names):
                for i in range(self.contributions.shape[0]):
                    w.writerow([i, name, repr(float(self.contributions[i, j]))])


def knn_projection(target, z, k: int = 10) -> np.ndarray:
    """Mean of ``target`` over each unit's ``k`` nearest other units in standardized ``z``."""
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    n = z.shape[0]
    if n < 2:
        raise DomainError("k-NN projection needs at least two units")
    k = min(k, n - 1)
    sd = z.std(axis=0)
    zs = (z - z.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    if zs.shape[1] == 0:
        return (t.sum() - t) / (n - 1)
    _, idx = cKDTree(zs).query(zs, k=k + 1)
    idx = np.atleast_2d(idx)
    own = idx == np.arange(n)[:, None]
    # drop self where it was returned, otherwise the farthest neighbour
    drop_last = ~own.any(axis=1)
    keep = ~own
    keep[drop_last, -1] = False
    ids = idx[keep].reshape(n, k)
    return t[ids].mean(axis=1)


def tevim(
    cate_point, z, names=None, projector: str = "bart", projector_cfg: BartConfig | None = None, seed=None, k: int = 10
) -> TevimResult:
    """Leave-one-covariate-out importance of each column of ``z`` for the CATE."""
    tau = np.asarray(cate_point, dtype=np.float64).reshape(-1)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] != tau.shape[0]:
        raise DomainError("z must have one row per CATE value")
    P = z.shape[1]
    names = tuple(names) if names is not None else tuple(f"Z{j + 1}" for j in range(P))
    if len(names) != P:
        raise DomainError("one name per covariate is required")
    contrib = np.zeros((tau.shape[0], P))
    if np.ptp(tau) == 0:
        return TevimResult(names, np.zeros(P), contrib, {"projector": projector, "constant": True})
    cfg = projector_cfg or PROJECTOR_DEFAULTS
    for j in range(P):
        rest = np.delete(z, j, axis=1)
        if projector == "knn":
            proj = knn_projection(tau, rest, k)
        elif projector == "bart":
            proj = fit_bart(rest, tau, cfg, seed=substream(0 if seed is None else seed, j))
        else:
            raise DomainError(f"unknown projector {projector!r}")
        contrib[:, j] = (tau - proj) ** 2
    info = {"projector": projector}
    info.update({"k": k} if projector == "knn" else {"n_trees": cfg.n_trees, "burn_in": cfg.burn_in, "n_draws": cfg.n_draws})
    return TevimResult(names, contrib.mean(axis=0), contrib, info)


@dataclass(frozen=True)
class SubgroupTree:
    tree: RegressionTree
    names: tuple
    node_mean: np.ndarray
    node_size: np.ndarray
    node_lo: np.ndarray
    node_hi: np.ndarray

    @property
    def terminal(self) -> np.ndarray:
        return self.tree.leaves

    def to_dict(self, node: int = 0) -> dict:
        t = self.tree
        out = {
            "node": node,
            "n": int(self.node_size[node]),
            "mean_cate": float(self.node_mean[node]),
            "lo95": float(self.node_lo[node]),
            "hi95": float(self.node_hi[node]),
        }
        if t.left[node] >= 0:
            f = int(t.feature[node])
            out.update(
                feature=self.names[f], feature_index=f, threshold=float(t.threshold[node]),
                left=self.to_dict(int(t.left[node])), right=self.to_dict(int(t.right[node])),
            )
        return out

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")


def fit_the_fit(cate_point, z_selected, cate_draws=None, names=None, depth: int = 2, min_leaf: int = 7) -> SubgroupTree:
    """Depth-limited CART on the point CATEs with node means and 95% intervals.

    Node intervals are equal-tailed quantiles of per-draw node means when
    ``cate_draws`` (``S x n``) is given, otherwise they collapse to the mean.
    """
    tau = np.asarray(cate_point, dtype=np.float64).reshape(-1)
    z = np.atleast_2d(np.asarray(z_selected, dtype=np.float64))
    if z.shape[0] != tau.shape[0]:
        raise DomainError("z_selected must have one row per CATE value")
    names = tuple(names) if names is not None else tuple(f"Z{j + 1}" for j in range(z.shape[1]))
    tree = grow_cart(z, tau, max_depth=depth, min_leaf=min_leaf)
    # membership of every node, not just leaves
    m = tree.n_nodes
    member = np.zeros((m, tau.shape[0]), dtype=bool)
    member[0] = True
    for node in range(m):
        if tree.left[node] >= 0:
            go_left = z[:, tree.feature[node]] <= tree.threshold[node]
            member[tree.left[node]] = member[node] & go_left
            member[tree.right[node]] = member[node] & ~go_left
    size = member.sum(axis=1)
    mean = np.array([tau[mk].mean() for mk in member])
    if cate_draws is not None:
        draws = np.asarray(cate_draws, dtype=np.float64)
        node_draws = np.stack([draws[:, mk].mean(axis=1) for mk in member], axis=1)
        lo, hi = np.quantile(node_draws, [0.025, 0.975], axis=0)
        lo, hi = np.minimum(lo, mean), np.maximum(hi, mean)
    else:
        lo, hi = mean.copy(), mean.copy()
    return SubgroupTree(tree, names, mean, size, lo, hi)
