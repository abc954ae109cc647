"""Simulation designs for clustered heterogeneous-effect benchmarks.

Three low-dimensional heterogeneity settings (``HS1``-``HS3``) share one
baseline surface; three high-dimensional designs (``HD20``, ``HD50``,
``HD100``) extend ``HS3``-style effects with many noise covariates.
Cluster intercepts are normal or (skewed) gamma.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from .data import ClusteredDataset, VarianceComponents, variance_partition
from .errors import DomainError
from .rng import as_generator

__all__ = [
    "SCENARIOS",
    "ScenarioSpec",
    "SimulatedTruth",
    "generate",
    "eval_tau",
    "eval_f0",
    "tau_surface",
    "f0_surface",
    "draw_intercepts",
    "draw_cluster_sizes",
    "estimate_str",
    "LOG_FLOOR",
]

LOG_FLOOR = 1e-12

SCENARIOS = ("HS1", "HS2", "HS3", "HD20", "HD50", "HD100")

# (n cluster covariates, of which continuous, n individual covariates, of which continuous)
_LAYOUT = {
    "HS": (2, 1, 8, 5),
    "HD20": (4, 2, 16, 8),
    "HD50": (8, 4, 42, 21),
    "HD100": (10, 5, 90, 50),
}
_HD_TOTAL_VAR = {"HD20": 1.5, "HD50": 2.0, "HD100": 2.5}


def _layout(scenario: str):
    if scenario not in SCENARIOS:
        raise DomainError(f"unknown scenario {scenario!r}")
    return _LAYOUT["HS" if scenario.startswith("HS") else scenario]


def _glog(u):
    return np.log(np.maximum(np.abs(u), LOG_FLOOR))


def _sigmoid(u):
    return 1.0 / (1.0 + np.exp(-u))


def _cols(x, v):
    # 1-based column accessors matching the usual X_j / V_j notation
    return (lambda j: x[:, j - 1]), (lambda j: v[:, j - 1])


def _f0_hs(x, v):
    X, V = _cols(x, v)
    return np.sin(np.pi * X(1) * X(2)) - np.sqrt(np.abs(X(4) - V(1))) + np.log(1.0 + V(2)) + 0.5 * X(6)


def _tau_hs1(x, v):
    X, V = _cols(x, v)
    return 1.0 - 0.8 * _sigmoid(X(2)) - 0.4 * X(3) ** 2 + 0.5 * V(2)


def _tau_hs2(x, v):
    X, V = _cols(x, v)
    return -0.5 + 0.6 * np.sin(np.pi * X(1) * X(2)) + 0.3 * np.cos(X(4)) - 0.4 * X(5) ** 2 + 0.4 * V(2)


def _tau_hs3(x, v):
    X, V = _cols(x, v)
    return (
        0.6
        + 0.7 * _glog(X(1) * X(2) + X(8))
        + 0.4 * _sigmoid(X(2) + X(5))
        - 0.3 * np.sin(np.pi * X(4) * X(5))
        + 0.3 * V(2)
    )


def _f0_hd20(x, v):
    X, V = _cols(x, v)
    return np.sin(np.pi * X(1) * X(2)) + _glog(X(5) + V(3)) + 0.3 * X(10) - 0.7 * X(15)


def _tau_hd20(x, v):
    X, V = _cols(x, v)
    return (
        0.5
        - 0.8 * _sigmoid(X(1) + X(2))
        + 0.4 * np.sin(np.pi * X(6) * X(8))
        + 0.3 * X(10)
        + 0.7 * _glog(0.5 + X(16))
        - 0.6 * V(2)
        + 0.2 * V(3)
    )


def _f0_hd50(x, v):
    X, V = _cols(x, v)
    return (
        np.sin(np.pi * X(1) * X(2))
        + _glog(X(5) + V(6))
        + 0.3 * X(16)
        - np.sqrt(np.abs(X(20) - X(30)))
        + 0.4 * X(36) ** 2
        - 0.5 * V(2)
    )


def _tau_hd50(x, v):
    X, V = _cols(x, v)
    return (
        0.7
        + 0.5 * np.sin(np.pi * X(5) * X(6))
        + 0.2 * X(13)
        - 0.3 * X(17) ** 2
        - 0.6 * _sigmoid(X(18) + X(20))
        - 0.4 * np.cos(X(21))
        + 0.7 * X(30)
        + 0.6 * _glog(0.5 + X(42))
        - 0.6 * V(2)
        + 0.4 * V(6)
    )


def _f0_hd100(x, v):
    X, V = _cols(x, v)
    return (
        np.sin(np.pi * X(1) * X(2))
        + _glog(X(5) + V(6))
        + 0.3 * X(10)
        - 0.7 * X(15)
        - np.sqrt(np.abs(X(20) - X(60)))
        + 0.4 * X(25) ** 2
        + 0.5 * X(60)
        + 0.8 * X(62)
        - _glog(1.0 + X(70))
    )


def _tau_hd100(x, v):
    X, V = _cols(x, v)
    return (
        1.5
        - 0.8 * _sigmoid(X(1) + X(2))
        - 0.4 * X(6) ** 2
        - np.cos(X(22))
        + 0.3 * np.sin(np.pi * X(30) * X(34))
        + 0.1 * X(36)
        - 0.2 * X(50) ** 2
        + 0.7 * X(60)
        - 0.5 * X(65)
        + 0.8 * _glog(1.0 + X(80))
        - 0.6 * V(2)
        - 0.2 * np.exp(V(5))
        + 0.5 * V(6)
    )


_TAU: dict[str, Callable] = {
    "HS1": _tau_hs1,
    "HS2": _tau_hs2,
    "HS3": _tau_hs3,
    "HD20": _tau_hd20,
    "HD50": _tau_hd50,
    "HD100": _tau_hd100,
}
_F0: dict[str, Callable] = {
    "HS1": _f0_hs,
    "HS2": _f0_hs,
    "HS3": _f0_hs,
    "HD20": _f0_hd20,
    "HD50": _f0_hd50,
    "HD100": _f0_hd100,
}


def _as_matrix(a, width, what):
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[1] != width:
        raise DomainError(f"{what} has {a.shape[1]} columns, scenario expects {width}")
    return a, single


def _evaluate(table, scenario, x, v):
    pv, _, px, _ = _layout(scenario)
    xm, single = _as_matrix(x, px, "x")
    vm, _ = _as_matrix(v, pv, "v")
    if xm.shape[0] != vm.shape[0]:
        raise DomainError("x and v have different row counts")
    out = table[scenario](xm, vm)
    return float(out[0]) if single else out


def tau_surface(scenario: str, x, v):
    """Vectorised treatment-effect surface; rows of ``x`` and ``v`` align."""
    return _evaluate(_TAU, scenario, x, v)


def f0_surface(scenario: str, x, v):
    """Vectorised baseline outcome surface."""
    return _evaluate(_F0, scenario, x, v)


def eval_tau(scenario: str, x, v) -> float:
    """True CATE of ``scenario`` at a single covariate profile."""
    return tau_surface(scenario, np.asarray(x, dtype=float).reshape(-1), np.asarray(v, dtype=float).reshape(1, -1))


def eval_f0(scenario: str, x, v) -> float:
    """Baseline outcome of ``scenario`` at a single covariate profile."""
    return f0_surface(scenario, np.asarray(x, dtype=float).reshape(-1), np.asarray(v, dtype=float).reshape(1, -1))


@dataclass(frozen=True)
class ScenarioSpec:
    """Parameters of one simulation design.

    ``constant_effect`` replaces the scenario's effect surface by a constant,
    which gives the null (0) and constant-effect calibration designs.
    ``total_var`` defaults to 1 for ``HS*`` and is fixed for ``HD*``.
    """

    scenario: str = "HS1"
    intercept_dist: str = "Normal"
    n_clusters: int = 30
    expected_cluster_size: float = 100.0
    total_var: float | None = None
    icc: float = 0.1
    seed: int = 0
    gamma_centered: bool = True
    constant_effect: float | None = None

    def __post_init__(self):
        _layout(self.scenario)
        if self.intercept_dist not in ("Normal", "Gamma"):
            raise DomainError(f"intercept_dist must be Normal or Gamma, got {self.intercept_dist!r}")
        if self.n_clusters < 2:
            raise DomainError("n_clusters must be at least 2")
        if not (self.expected_cluster_size >= 1):
            raise DomainError("expected_cluster_size must be >= 1")
        forced = _HD_TOTAL_VAR.get(self.scenario)
        if self.total_var is None:
            object.__setattr__(self, "total_var", forced if forced is not None else 1.0)
        elif forced is not None and not math.isclose(self.total_var, forced):
            raise DomainError(f"{self.scenario} fixes total_var at {forced}")
        # validates icc and total_var ranges
        variance_partition(self.total_var, self.icc)

    @property
    def variance(self) -> VarianceComponents:
        return variance_partition(self.total_var, self.icc)

    @property
    def target_n(self) -> float:
        return self.n_clusters * self.expected_cluster_size

    @property
    def dims(self) -> tuple[int, int]:
        """``(p_x, p_v)``."""
        pv, _, px, _ = _layout(self.scenario)
        return px, pv

    def to_dict(self) -> dict:
        return {k: val for k, val in asdict(self).items() if val is not None}

    def replace(self, **kw) -> "ScenarioSpec":
        return replace(self, **kw)


@dataclass(frozen=True)
class SimulatedTruth:
    dataset: ClusteredDataset
    tau_true: np.ndarray
    f0_true: np.ndarray
    b_true: np.ndarray
    spec: ScenarioSpec | None = None


def draw_intercepts(dist: str, sigma_b2: float, n_clusters: int, rng, centered: bool = True) -> np.ndarray:
    """Cluster random intercepts with variance ``sigma_b2``.

    The gamma option uses shape 2 and scale ``sigma_b / sqrt(2)`` (skewness
    ``sqrt(2)``), shifted to mean zero unless ``centered`` is false.
    """
    if sigma_b2 < 0:
        raise DomainError("sigma_b2 must be non-negative")
    rng = as_generator(rng)
    if sigma_b2 == 0:
        return np.zeros(n_clusters)
    if dist == "Normal":
        return rng.normal(0.0, math.sqrt(sigma_b2), n_clusters)
    if dist == "Gamma":
        shape = 2.0
        scale = math.sqrt(sigma_b2) / math.sqrt(2.0)
        b = rng.gamma(shape, scale, n_clusters)
        return b - shape * scale if centered else b
    raise DomainError(f"unknown intercept distribution {dist!r}")


def draw_cluster_sizes(n_clusters: int, target_n: float, rng) -> np.ndarray:
    """Discrete-uniform sizes on ``floor(0.5 n/I) .. ceil(1.5 n/I)``."""
    lo = max(1, math.floor(0.5 * target_n / n_clusters))
    hi = max(lo, math.ceil(1.5 * target_n / n_clusters))
    return rng.integers(lo, hi + 1, n_clusters)


def _draw_covariates(scenario, n_rows, n_clusters, cluster_id, rng):
    pv, pv_cont, px, px_cont = _layout(scenario)
    v_cl = np.empty((n_clusters, pv))
    v_cl[:, :pv_cont] = rng.standard_normal((n_clusters, pv_cont))
    v_cl[:, pv_cont:] = rng.integers(0, 2, (n_clusters, pv - pv_cont))
    x = np.empty((n_rows, px))
    x[:, :px_cont] = rng.standard_normal((n_rows, px_cont))
    x[:, px_cont:] = rng.integers(0, 2, (n_rows, px - px_cont))
    return x, v_cl[cluster_id]


def _assign_arms(n_clusters, rng):
    n_treat = n_clusters // 2
    if n_clusters % 2 and rng.random() < 0.5:
        n_treat += 1
    arms = np.zeros(n_clusters, dtype=np.int64)
    arms[rng.permutation(n_clusters)[:n_treat]] = 1
    return arms


def generate(spec: ScenarioSpec, rng=None) -> SimulatedTruth:
    """Simulate one trial; ``rng`` defaults to a stream seeded by ``spec.seed``."""
    rng = as_generator(spec.seed if rng is None else rng)
    I = spec.n_clusters
    vc = spec.variance
    sizes = draw_cluster_sizes(I, spec.target_n, rng)
    cluster_id = np.repeat(np.arange(I), sizes)
    n = cluster_id.shape[0]
    x, v = _draw_covariates(spec.scenario, n, I, cluster_id, rng)
    arms = _assign_arms(I, rng)
    b = draw_intercepts(spec.intercept_dist, vc.sigma_b2, I, rng, centered=spec.gamma_centered)
    eps = rng.normal(0.0, math.sqrt(vc.sigma2), n)
    f0 = f0_surface(spec.scenario, x, v)
    if spec.constant_effect is None:
        tau = tau_surface(spec.scenario, x, v)
    else:
        tau = np.full(n, float(spec.constant_effect))
    a = arms[cluster_id]
    y = f0 + a * tau + b[cluster_id] + eps
    px, pv = spec.dims
    ds = ClusteredDataset(
        cluster_id=cluster_id,
        treatment=a,
        outcome=y,
        x=x,
        v=v,
        x_names=tuple(f"X{k + 1}" for k in range(px)),
        v_names=tuple(f"V{k + 1}" for k in range(pv)),
    )
    return SimulatedTruth(dataset=ds, tau_true=tau, f0_true=f0, b_true=b, spec=spec)


def estimate_str(spec: ScenarioSpec, n_mc: int = 200_000, rng=None) -> float:
    """Monte Carlo signal-to-total variance ratio of a design.

    Individuals are drawn independently with ``A ~ Bernoulli(0.5)``; the
    intercept enters through its marginal distribution.
    """
    if n_mc < 10_000:
        raise DomainError("n_mc must be at least 1e4")
    rng = as_generator(spec.seed if rng is None else rng)
    vc = spec.variance
    x, v = _draw_covariates(spec.scenario, n_mc, n_mc, np.arange(n_mc), rng)
    a = rng.integers(0, 2, n_mc)
    b = draw_intercepts(spec.intercept_dist, vc.sigma_b2, n_mc, rng, centered=spec.gamma_centered)
    tau = tau_surface(spec.scenario, x, v) if spec.constant_effect is None else float(spec.constant_effect)
    signal = f0_surface(spec.scenario, x, v) + a * tau + b
    eps = rng.normal(0.0, math.sqrt(vc.sigma2), n_mc)
    return float(np.var(signal) / np.var(signal + eps))
