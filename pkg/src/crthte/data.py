"""Clustered-trial data model, CSV ingestion and variance-component helpers.

All learners consume a :class:`ClusteredDataset`.  Cluster labels are
re-indexed to ``0..I-1`` on construction so per-cluster quantities can be
stored in plain arrays indexed by ``cluster_id``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConstraintViolation, DomainError, ParseError

__all__ = [
    "ClusteredDataset",
    "ColumnSchema",
    "VarianceComponents",
    "CateEstimate",
    "load_dataset",
    "save_dataset",
    "variance_partition",
    "gaussian_working_loss",
    "working_loss_from_sums",
    "cluster_sums",
]


def _is_binary(col: np.ndarray) -> bool:
    return bool(np.all((col == 0.0) | (col == 1.0)))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ClusteredDataset:
    """Individual-level records from a two-arm parallel cluster-randomized trial.

    Parameters
    ----------
    cluster_id
        Dense cluster index ``0..I-1`` per row.
    treatment
        Arm of the row's cluster (0 control, 1 intervention).
    outcome
        Continuous outcome per row.
    x
        Individual-level covariates, shape ``(n, p_x)``.
    v
        Cluster-level covariates replicated per row, shape ``(n, p_v)``.
    x_names, v_names
        Column labels.
    cluster_labels
        Original cluster label for each dense index.
    """

    cluster_id: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    x: np.ndarray
    v: np.ndarray
    x_names: tuple[str, ...] = ()
    v_names: tuple[str, ...] = ()
    cluster_labels: tuple = ()
    x_binary: tuple[bool, ...] = field(default=(), compare=False)
    v_binary: tuple[bool, ...] = field(default=(), compare=False)

    def __post_init__(self):
        cid = np.asarray(self.cluster_id)
        n = cid.shape[0]
        if n == 0:
            raise ConstraintViolation("dataset has no rows")
        labels, dense = np.unique(cid, return_inverse=True)
        treatment = np.asarray(self.treatment, dtype=np.int64).reshape(-1)
        outcome = np.asarray(self.outcome, dtype=np.float64).reshape(-1)
        x = np.asarray(self.x, dtype=np.float64).reshape(n, -1)
        v = np.asarray(self.v, dtype=np.float64).reshape(n, -1)
        if treatment.shape[0] != n or outcome.shape[0] != n:
            raise ConstraintViolation("column lengths differ")
        if not np.all((treatment == 0) | (treatment == 1)):
            raise ConstraintViolation("treatment must be binary 0/1")
        if x.shape[1] + v.shape[1] == 0:
            raise ConstraintViolation("at least one covariate is required")
        n_clusters = labels.shape[0]
        if n_clusters < 2:
            raise ConstraintViolation("at least two clusters are required")
        arm_max = np.zeros(n_clusters, dtype=np.int64)
        arm_min = np.ones(n_clusters, dtype=np.int64)
        np.maximum.at(arm_max, dense, treatment)
        np.minimum.at(arm_min, dense, treatment)
        bad = np.flatnonzero(arm_max != arm_min)
        if bad.size:
            raise ConstraintViolation(
                f"treatment is not constant within cluster {labels[bad[0]]!r}"
            )
        if arm_max.min() == arm_max.max():
            raise ConstraintViolation("need at least one treated and one control cluster")
        if v.shape[1]:
            first = np.zeros(n_clusters, dtype=np.int64)
            first[dense[::-1]] = np.arange(n)[::-1]
            if not np.array_equal(v, v[first[dense]]):
                raise ConstraintViolation("cluster-level covariates vary within a cluster")
        if self.cluster_labels and len(self.cluster_labels) == n_clusters:
            # already densely indexed with labels supplied
            mapped = tuple(self.cluster_labels)
            if not np.array_equal(labels, np.arange(n_clusters)):
                mapped = tuple(labels.tolist())
        else:
            mapped = tuple(labels.tolist())
        x_names = tuple(self.x_names) or tuple(f"X{k + 1}" for k in range(x.shape[1]))
        v_names = tuple(self.v_names) or tuple(f"V{k + 1}" for k in range(v.shape[1]))
        if len(x_names) != x.shape[1] or len(v_names) != v.shape[1]:
            raise ConstraintViolation("covariate name count does not match columns")
        set_ = object.__setattr__
        set_(self, "cluster_id", _frozen(dense.astype(np.int64)))
        set_(self, "treatment", _frozen(treatment))
        set_(self, "outcome", _frozen(outcome))
        set_(self, "x", _frozen(x))
        set_(self, "v", _frozen(v))
        set_(self, "x_names", x_names)
        set_(self, "v_names", v_names)
        set_(self, "cluster_labels", mapped)
        set_(self, "x_binary", tuple(_is_binary(x[:, k]) for k in range(x.shape[1])))
        set_(self, "v_binary", tuple(_is_binary(v[:, k]) for k in range(v.shape[1])))

    @property
    def n(self) -> int:
        return int(self.outcome.shape[0])

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_labels)

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_id, minlength=self.n_clusters)

    @property
    def cluster_treatment(self) -> np.ndarray:
        """Arm of each cluster, indexed by dense cluster id."""
        out = np.zeros(self.n_clusters, dtype=np.int64)
        out[self.cluster_id] = self.treatment
        return out

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return self.x_names + self.v_names

    @property
    def covariate_binary(self) -> tuple[bool, ...]:
        return self.x_binary + self.v_binary

    def covariates(self) -> np.ndarray:
        """Full baseline covariate matrix ``Z = [X, V]``."""
        return np.hstack([self.x, self.v])

    def design(self, arm: int | np.ndarray | None = None) -> np.ndarray:
        """S-learner input matrix ``[X, V, A]`` with ``A`` optionally overridden."""
        a = self.treatment if arm is None else np.broadcast_to(arm, (self.n,))
        return np.hstack([self.x, self.v, np.asarray(a, dtype=np.float64)[:, None]])

    def subset_clusters(self, clusters: Sequence[int]) -> "ClusteredDataset":
        """Stack the rows of the given dense clusters, duplicates getting fresh ids."""
        order = np.argsort(self.cluster_id, kind="stable")
        starts = np.concatenate([[0], np.cumsum(self.cluster_sizes)])
        rows, ids = [], []
        for new_id, c in enumerate(clusters):
            r = order[starts[c]:starts[c + 1]]
            rows.append(r)
            ids.append(np.full(r.shape[0], new_id))
        rows = np.concatenate(rows)
        return ClusteredDataset(
            cluster_id=np.concatenate(ids),
            treatment=self.treatment[rows],
            outcome=self.outcome[rows],
            x=self.x[rows],
            v=self.v[rows],
            x_names=self.x_names,
            v_names=self.v_names,
        )

    def with_outcome(self, outcome: np.ndarray) -> "ClusteredDataset":
        return ClusteredDataset(
            cluster_id=self.cluster_id,
            treatment=self.treatment,
            outcome=outcome,
            x=self.x,
            v=self.v,
            x_names=self.x_names,
            v_names=self.v_names,
            cluster_labels=self.cluster_labels,
        )


@dataclass(frozen=True)
class ColumnSchema:
    """Maps CSV columns to their roles in the trial."""

    cluster: str
    treatment: str
    outcome: str
    individual: tuple[str, ...]
    cluster_level: tuple[str, ...] = ()

    @classmethod
    def from_mapping(cls, m: dict) -> "ColumnSchema":
        return cls(
            cluster=m["cluster"],
            treatment=m["treatment"],
            outcome=m["outcome"],
            individual=tuple(m.get("individual", ())),
            cluster_level=tuple(m.get("cluster_level", ())),
        )


def _parse_float(text: str, column: str, line: int) -> float:
    s = text.strip()
    if s == "" or s.lower() in ("na", "nan", "null", "none"):
        raise ParseError(f"missing value in column {column!r} at line {line}")
    try:
        val = float(s)
    except ValueError:
        raise ParseError(f"non-numeric value {s!r} in column {column!r} at line {line}") from None
    if not math.isfinite(val):
        raise ParseError(f"non-finite value in column {column!r} at line {line}")
    return val


def read_csv_columns(path: str | Path) -> dict[str, list[str]]:
    """Read a headed CSV into raw string columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        cols: dict[str, list[str]] = {h: [] for h in header}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
            for h, val in zip(header, row):
                cols[h].append(val)
    return cols


def load_dataset(
    path: str | Path,
    schema: ColumnSchema | dict,
    *,
    append_cluster_size: bool = False,
    columns: dict[str, list[str]] | None = None,
) -> ClusteredDataset:
    """Load and validate a trial CSV.

    ``columns`` may carry pre-read (e.g. imputed) raw columns, in which case
    ``path`` is only used in messages.
    """
    if isinstance(schema, dict):
        schema = ColumnSchema.from_mapping(schema)
    cols = read_csv_columns(path) if columns is None else columns
    needed = (schema.cluster, schema.treatment, schema.outcome, *schema.individual, *schema.cluster_level)
    missing = [c for c in needed if c not in cols]
    if missing:
        raise ParseError(f"{path}: missing columns {missing}")
    if not schema.individual and not schema.cluster_level:
        raise ParseError("schema names no covariates")

    def numeric(name):
        return np.array([_parse_float(s, name, i + 2) for i, s in enumerate(cols[name])])

    raw_cluster = [s.strip() for s in cols[schema.cluster]]
    if any(s == "" for s in raw_cluster):
        raise ParseError(f"{path}: missing cluster id")
    try:
        cluster = np.array([int(s) for s in raw_cluster])
    except ValueError:
        cluster = np.array(raw_cluster)
    treatment = numeric(schema.treatment)
    if not np.all((treatment == 0) | (treatment == 1)):
        raise ConstraintViolation("treatment column must hold 0/1 values")
    x = np.column_stack([numeric(c) for c in schema.individual]) if schema.individual else np.zeros((len(cluster), 0))
    v_cols = [numeric(c) for c in schema.cluster_level]
    v_names = list(schema.cluster_level)
    if append_cluster_size:
        _, inv, counts = np.unique(cluster, return_inverse=True, return_counts=True)
        v_cols.append(counts[inv].astype(float))
        v_names.append("cluster_size")
    v = np.column_stack(v_cols) if v_cols else np.zeros((len(cluster), 0))
    return ClusteredDataset(
        cluster_id=cluster,
        treatment=treatment,
        outcome=numeric(schema.outcome),
        x=x,
        v=v,
        x_names=tuple(schema.individual),
        v_names=tuple(v_names),
    )


def save_dataset(ds: ClusteredDataset, path: str | Path) -> ColumnSchema:
    """Write a dataset as CSV and return the schema that reads it back."""
    header = ["cluster", "treatment", "outcome", *ds.x_names, *ds.v_names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for i in range(ds.n):
            w.writerow(
                [int(ds.cluster_id[i]), int(ds.treatment[i]), repr(float(ds.outcome[i]))]
                + [repr(float(a)) for a in ds.x[i]]
                + [repr(float(a)) for a in ds.v[i]]
            )
    return ColumnSchema("cluster", "treatment", "outcome", ds.x_names, ds.v_names)


@dataclass(frozen=True)
class VarianceComponents:
    """Between-cluster and residual variance of the random-intercept model."""

    sigma_b2: float
    sigma2: float

    def __post_init__(self):
        if not (self.sigma_b2 >= 0.0) or not (self.sigma2 > 0.0):
            raise DomainError(f"invalid variance components ({self.sigma_b2}, {self.sigma2})")

    def icc(self) -> float:
        return self.sigma_b2 / (self.sigma_b2 + self.sigma2)

    @property
    def total(self) -> float:
        return self.sigma_b2 + self.sigma2


def variance_partition(total_var: float, icc: float) -> VarianceComponents:
    """Split a total outcome variance into ``(sigma_b2, sigma2)`` at a given ICC."""
    if not (total_var > 0.0):
        raise DomainError(f"total_var must be positive, got {total_var}")
    if not (0.0 <= icc < 1.0):
        raise DomainError(f"icc must lie in [0, 1), got {icc}")
    return VarianceComponents(sigma_b2=icc * total_var, sigma2=(1.0 - icc) * total_var)


def cluster_sums(r: np.ndarray, cluster_id: np.ndarray, n_clusters: int):
    """Per-cluster count, sum and sum of squares of a residual vector."""
    cnt = np.bincount(cluster_id, minlength=n_clusters).astype(np.float64)
    s = np.bincount(cluster_id, weights=r, minlength=n_clusters)
    ss = np.bincount(cluster_id, weights=r * r, minlength=n_clusters)
    return cnt, s, ss


def working_loss_from_sums(cnt, s, ss, sigma_b2: float, sigma2: float) -> float:
    """Gaussian working loss from per-cluster sufficient statistics.

    Uses ``|Omega_i| = sigma2**(N_i-1) * (sigma2 + N_i sigma_b2)`` and the
    Sherman-Morrison inverse of the compound-symmetric block.
    """
    cnt = np.asarray(cnt, dtype=np.float64)
    d = sigma2 + cnt * sigma_b2
    logdet = (cnt - 1.0) * math.log(sigma2) + np.log(d)
    quad = (np.asarray(ss) - sigma_b2 * np.asarray(s) ** 2 / d) / sigma2
    return 0.5 * float(np.sum(logdet + quad))


def gaussian_working_loss(residuals: Iterable[np.ndarray], vc: VarianceComponents) -> float:
    """``0.5 * sum_i {log|Omega_i| + r_i' Omega_i^{-1} r_i}`` over clusters."""
    if not (vc.sigma2 > 0):
        raise DomainError("sigma2 must be positive")
    rs = [np.asarray(r, dtype=np.float64) for r in residuals]
    cnt = np.array([r.shape[0] for r in rs], dtype=np.float64)
    s = np.array([r.sum() for r in rs])
    ss = np.array([r @ r for r in rs])
    return working_loss_from_sums(cnt, s, ss, vc.sigma_b2, vc.sigma2)


@dataclass(frozen=True)
class CateEstimate:
    """Per-individual CATE point estimates with 95% (or other level) bounds."""

    point: np.ndarray
    lo95: np.ndarray
    hi95: np.ndarray
    method: str = ""
    extras: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        p = np.asarray(self.point, dtype=np.float64).reshape(-1)
        lo = np.asarray(self.lo95, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.hi95, dtype=np.float64).reshape(-1)
        if not (p.shape == lo.shape == hi.shape):
            raise DomainError("point and bounds must have equal length")
        if np.any(lo > p) or np.any(p > hi):
            raise DomainError("interval does not contain its point estimate")
        object.__setattr__(self, "point", p)
        object.__setattr__(self, "lo95", lo)
        object.__setattr__(self, "hi95", hi)

    @classmethod
    def enclosing(cls, point, lo, hi, method: str = "", **extras) -> "CateEstimate":
        """Build an estimate, widening bounds that fail to contain the point."""
        point = np.asarray(point, dtype=np.float64)
        return cls(point, np.minimum(lo, point), np.maximum(hi, point), method, extras)

    def __len__(self) -> int:
        return self.point.shape[0]

    def to_csv(self, path: str | Path, cluster_id: np.ndarray | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["unit", "cluster", "point", "lo95", "hi95"])
            for i in range(len(self)):
                cl = "" if cluster_id is None else int(cluster_id[i])
                w.writerow([i, cl, repr(float(self.point[i])), repr(float(self.lo95[i])), repr(float(self.hi95[i]))])

    @classmethod
    def from_csv(cls, path: str | Path, method: str = "") -> "CateEstimate":
        cols = read_csv_columns(path)
        get = lambda k: np.array([float(s) for s in cols[k]])  # noqa: E731
        return cls(get("point"), get("lo95"), get("hi95"), method)
