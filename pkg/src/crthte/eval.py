"""Performance metrics, the cluster bootstrap and the Monte Carlo runner."""

from __future__ import annotations

import csv
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import CateEstimate, ClusteredDataset
from .dgp import ScenarioSpec, generate
from .errors import BootstrapDegenerate, DomainError
from .rng import as_generator, substream

__all__ = [
    "pehe",
    "abs_bias",
    "regret",
    "coverage_and_length",
    "score",
    "MetricsReport",
    "ExperimentResult",
    "cluster_bootstrap",
    "run_experiment",
    "METRICS",
]

METRICS = ("abs_bias", "pehe", "coverage", "regret", "interval_length")
MAX_REJECTIONS = 50


def _pair(tau_hat, tau_true):
    a = np.asarray(tau_hat, dtype=np.float64).reshape(-1)
    b = np.asarray(tau_true, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DomainError(f"length mismatch: {a.shape[0]} estimates for {b.shape[0]} true effects")
    if a.size == 0:
        raise DomainError("no units to score")
    return a, b


def pehe(tau_hat, tau_true) -> float:
    a, b = _pair(tau_hat, tau_true)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def abs_bias(tau_hat, tau_true) -> float:
    a, b = _pair(tau_hat, tau_true)
    return float(np.mean(np.abs(a - b)))


def _sign(u):
    # sign(0) is taken as +1
    return np.where(u >= 0, 1.0, -1.0)


def regret(tau_hat, tau_true) -> float:
    """Mean ``|tau|`` over units whose estimated best arm differs from the true one."""
    a, b = _pair(tau_hat, tau_true)
    return float(np.mean(np.abs(b) * (_sign(a) != _sign(b))))


def coverage_and_length(intervals, tau_true) -> tuple[float, float]:
    """Share of true effects inside their interval and the mean interval width."""
    if isinstance(intervals, CateEstimate):
        lo, hi = intervals.lo95, intervals.hi95
    else:
        arr = np.asarray(intervals, dtype=np.float64).reshape(-1, 2)
        lo, hi = arr[:, 0], arr[:, 1]
    lo, t = _pair(lo, tau_true)
    hi = np.asarray(hi, dtype=np.float64)
    return float(np.mean((lo <= t) & (t <= hi))), float(np.mean(hi - lo))


def score(est: CateEstimate, tau_true) -> dict:
    cov, length = coverage_and_length(est, tau_true)
    return {
        "abs_bias": abs_bias(est.point, tau_true),
        "pehe": pehe(est.point, tau_true),
        "coverage": cov,
        "regret": regret(est.point, tau_true),
        "interval_length": length,
    }


# ---------------------------------------------------------------- bootstrap


def _draw_resample(cluster_treatment, rng):
    I = cluster_treatment.shape[0]
    for attempt in range(MAX_REJECTIONS + 1):
        pick = rng.integers(0, I, I)
        arms = cluster_treatment[pick]
        if arms.min() != arms.max():
            return pick, attempt
    raise BootstrapDegenerate(f"more than {MAX_REJECTIONS} single-arm cluster resamples")


def _boot_job(args):
    proc, data, seed, b = args
    rng = substream(seed, 1, b)
    pick, rejected = _draw_resample(data.cluster_treatment, rng)
    boot = data.subset_clusters(pick)
    return np.asarray(proc(boot, data.x, data.v, substream(seed, 2, b)), dtype=np.float64), rejected


def cluster_bootstrap(
    fit_and_predict: Callable, data: ClusteredDataset, B: int = 200, level: float = 0.95, seed=0, workers: int = 1
) -> CateEstimate:
    """Percentile intervals from refits on clusters resampled with replacement.

    ``fit_and_predict(train, x, v, seed)`` returns effects at the rows
    ``(x, v)``; every refit predicts at the original units.  Resamples with a
    single arm are redrawn and counted in ``extras["rejected"]``.
    """
    if B < 1:
        raise DomainError("B must be >= 1")
    if not 0.0 < level < 1.0:
        raise DomainError("level must lie in (0, 1)")
    if not isinstance(seed, (int, np.integer)):
        seed = int(as_generator(seed).integers(0, 2**63 - 1))
    point = np.asarray(fit_and_predict(data, data.x, data.v, substream(seed, 0)), dtype=np.float64)
    jobs = [(fit_and_predict, data, int(seed), b) for b in range(B)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(_boot_job, jobs))
    else:
        out = [_boot_job(j) for j in jobs]
    reps = np.vstack([o[0] for o in out])
    rejected = int(sum(o[1] for o in out))
    lo, hi = np.quantile(reps, [(1 - level) / 2, (1 + level) / 2], axis=0)
    return CateEstimate.enclosing(point, lo, hi, method="bootstrap", rejected=rejected, replicates=reps)


# ---------------------------------------------------------------- experiments


@dataclass
class MetricsReport:
    method: str
    pehe: float
    abs_bias: float
    regret: float
    coverage: float
    interval_length: float
    per_replicate: dict = field(default_factory=dict)
    n_reps: int = 0
    n_failed: int = 0

    @property
    def failure_rate(self) -> float:
        total = self.n_reps + self.n_failed
        return self.n_failed / total if total else 0.0


@dataclass
class ExperimentResult:
    spec: ScenarioSpec
    methods: list
    rows: list  # (replicate, method, metrics dict)
    failures: list  # (replicate, method, message)
    reports: dict = field(default_factory=dict)

    def write(self, outdir: str | Path, svg: bool = True) -> list[Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = [outdir / "summary.csv", outdir / "replicates.csv", outdir / "failures.csv"]
        _write_csv(paths[0], ["method", "metric", "mean", "sd", "n_reps"], self.summary_rows())
        _write_csv(
            paths[1],
            ["replicate", "method", "metric", "value"],
            [(r, m, k, _fmt(met[k])) for r, m, met in self.rows for k in METRICS],
        )
        _write_csv(paths[2], ["replicate", "method", "error"], self.failures)
        if svg:
            paths.append(outdir / "boxplots.svg")
            boxplot_svg(self, paths[-1])
        return paths

    def summary_rows(self):
        out = []
        for m in self.methods:
            rep = self.reports[m]
            for k in METRICS:
                vals = np.asarray(rep.per_replicate.get(k, []), dtype=np.float64)
                mean = float(vals.mean()) if vals.size else math.nan
                sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0 if vals.size else math.nan
                out.append((m, k, _fmt(mean), _fmt(sd), vals.size))
        return out


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def _replicate_job(args):
    spec, methods, rep = args
    truth = generate(spec, substream(spec.seed, rep))
    rows, fails = [], []
    from .methods import method_key

    for m in methods:
        try:
            est = m.run(truth.dataset, substream(spec.seed, rep, method_key(m.display)))
            rows.append((rep, m.display, score(est, truth.tau_true)))
        except Exception as e:  # fail-soft: record and continue
            msg = f"{type(e).__name__}: {e}".strip()
            fails.append((rep, m.display, msg.splitlines()[0] if msg else traceback.format_exc(limit=1)))
    return rows, fails


def run_experiment(spec: ScenarioSpec, methods: Sequence, n_reps: int, workers: int = 1) -> ExperimentResult:
    """Simulate ``n_reps`` trials, fit every method and score it against the truth.

    Replicate ``r`` uses the stream ``(spec.seed, r)`` for data and
    ``(spec.seed, r, key(method))`` for fitting, so the result does not depend
    on ``workers``.
    """
    if n_reps < 1:
        raise DomainError("n_reps must be >= 1")
    methods = list(methods)
    names = [m.display for m in methods]
    if len(set(names)) != len(names):
        raise DomainError("method labels must be unique")
    jobs = [(spec, methods, r) for r in range(n_reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(_replicate_job, jobs))
    else:
        out = [_replicate_job(j) for j in jobs]
    rows = [row for o in out for row in o[0]]
    fails = [f for o in out for f in o[1]]
    reports = {}
    for name in names:
        mine = [met for _, m, met in rows if m == name]
        per = {k: np.array([met[k] for met in mine]) for k in METRICS}
        mean = {k: float(per[k].mean()) if len(mine) else math.nan for k in METRICS}
        reports[name] = MetricsReport(
            name, mean["pehe"], mean["abs_bias"], mean["regret"], mean["coverage"], mean["interval_length"],
            per, len(mine), sum(1 for _, m, _ in fails if m == name),
        )
    return ExperimentResult(spec, names, rows, fails, reports)


def boxplot_svg(result: ExperimentResult, path: str | Path) -> None:
    """Boxplots of absolute bias, PEHE, coverage and regret, one row each."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = ("abs_bias", "pehe", "coverage", "regret")
    titles = {"abs_bias": "Absolute bias", "pehe": "PEHE", "coverage": "Coverage", "regret": "Regret"}
    fig, axes = plt.subplots(len(rows), 1, figsize=(max(4, 1.1 * len(result.methods) + 2), 10), squeeze=False)
    for ax, k in zip(axes[:, 0], rows):
        data = [result.reports[m].per_replicate.get(k, np.array([])) for m in result.methods]
        ax.boxplot([d if len(d) else [np.nan] for d in data])
        ax.set_xticks(range(1, len(result.methods) + 1), result.methods)
        ax.set_ylabel(titles[k])
        if k == "coverage":
            ax.axhline(0.95, color="red", linestyle="--", linewidth=1)
    axes[0, 0].set_title(result.spec.scenario)
    fig.tight_layout()
    with matplotlib.rc_context({"svg.hashsalt": "crthte"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
