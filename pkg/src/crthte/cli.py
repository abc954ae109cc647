"""Command-line front end.

Every subcommand reads an optional TOML run configuration with the sections
``[scenario]``, ``[data]``, ``[method.<label>]``, ``[experiment]``,
``[output]`` and ``[tevim]``, and writes ``resolved.toml`` (all defaults
filled in, plus the build version) next to its outputs.

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .bart import BartConfig, PosteriorDraws, cate_from_draws, fit_ribart
from .bcf import fit_mbcf, mbcf_icc_posterior, posterior_ate
from .data import CateEstimate, ColumnSchema, load_dataset, read_csv_columns, save_dataset
from .dgp import ScenarioSpec, generate
from .errors import ConfigError, ConstraintViolation, CrtHteError, DomainError, ParseError
from .eval import run_experiment, score
from .methods import METHODS, MethodSpec, config_class, make_method
from .rng import substream
from .tevim import PROJECTOR_DEFAULTS, fit_the_fit, tevim

__all__ = ["main", "load_config", "RunConfig", "build_version", "impute_mean_mode", "infer_schema", "ENV_WORKERS"]

ENV_WORKERS = "CRTHTE_WORKERS"

_SCENARIO_KEYS = {f.name for f in dataclasses.fields(ScenarioSpec)}
_DATA_KEYS = {"path", "cluster", "treatment", "outcome", "individual", "cluster_level", "append_cluster_size"}
_EXPERIMENT_KEYS = {"reps", "workers", "seed"}
_OUTPUT_KEYS = {"directory", "svg"}
_TEVIM_KEYS = {"projector", "k", "n_trees", "burn_in", "n_draws", "seed", "top_k", "depth", "min_leaf"}
_METHOD_META = {"learner", "bootstrap", "label"}
_MISSING = {"", "NA", "NaN", "nan", "."}


# ---------------------------------------------------------------- configuration


@dataclasses.dataclass
class RunConfig:
    scenario: ScenarioSpec | None = None
    data: dict = dataclasses.field(default_factory=dict)
    methods: list = dataclasses.field(default_factory=list)
    experiment: dict = dataclasses.field(default_factory=dict)
    output: dict = dataclasses.field(default_factory=dict)
    tevim: dict = dataclasses.field(default_factory=dict)

    def resolved(self) -> dict:
        doc = {}
        if self.scenario is not None:
            doc["scenario"] = self.scenario.to_dict()
        if self.data:
            doc["data"] = dict(self.data)
        if self.methods:
            doc["method"] = {m.display: _method_dict(m) for m in self.methods}
        for key in ("experiment", "output", "tevim"):
            section = getattr(self, key)
            if section:
                doc[key] = dict(section)
        doc["build"] = {"version": build_version()}
        return doc


def _method_dict(m: MethodSpec) -> dict:
    out = {"learner": m.name, "bootstrap": m.bootstrap}
    out.update({k: v for k, v in dataclasses.asdict(m.config).items() if v is not None})
    return out


def _check_keys(section: str, table, allowed: set) -> dict:
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    bad = sorted(set(table) - allowed)
    if bad:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(bad)}")
    return dict(table)


def _method_from_table(label: str, table: dict) -> MethodSpec:
    table = dict(table)
    learner = table.pop("learner", label)
    if learner not in METHODS:
        raise ConfigError(f"[method.{label}]: unknown learner {learner!r}; expected one of {', '.join(METHODS)}")
    known = {f.name for f in dataclasses.fields(config_class(learner))} | _METHOD_META
    _check_keys(f"method.{label}", table, known)
    bootstrap = int(table.pop("bootstrap", 200))
    table.pop("label", None)
    table.pop("variant", None)
    try:
        return make_method(learner, bootstrap=bootstrap, label="" if label == learner else label, **table)
    except ConfigError as e:
        raise ConfigError(f"[method.{label}]: {e}") from e


def parse_config(doc: dict) -> RunConfig:
    """Validate a parsed TOML document, rejecting unknown sections and keys."""
    bad = sorted(set(doc) - {"scenario", "data", "method", "experiment", "output", "tevim", "build"})
    if bad:
        raise ConfigError(f"unknown section(s): {', '.join(bad)}")
    cfg = RunConfig()
    if "scenario" in doc:
        sc = _check_keys("scenario", doc["scenario"], _SCENARIO_KEYS)
        try:
            cfg.scenario = ScenarioSpec(**sc)
        except (DomainError, TypeError) as e:
            raise ConfigError(f"[scenario]: {e}") from e
    if "data" in doc:
        cfg.data = _check_keys("data", doc["data"], _DATA_KEYS)
    methods = doc.get("method", {})
    if not isinstance(methods, dict):
        raise ConfigError("[method] must hold [method.<label>] tables")
    cfg.methods = [_method_from_table(label, table) for label, table in methods.items()]
    cfg.experiment = _check_keys("experiment", doc.get("experiment", {}), _EXPERIMENT_KEYS)
    cfg.output = _check_keys("output", doc.get("output", {}), _OUTPUT_KEYS)
    cfg.tevim = _check_keys("tevim", doc.get("tevim", {}), _TEVIM_KEYS)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return parse_config(doc)


def build_version() -> str:
    """Package version, suffixed with ``git describe`` output when available."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        tag = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        tag = ""
    return f"{__version__}+{tag}" if tag else __version__


def _write_resolved(cfg: RunConfig, outdir: Path, **extra) -> None:
    doc = cfg.resolved()
    for section, values in extra.items():
        doc.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})
    (outdir / "resolved.toml").write_text(tomli_w.dumps(doc), encoding="utf-8")
    (outdir / "VERSION").write_text(doc["build"]["version"] + "\n", encoding="utf-8")


def _outdir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.output.get("directory", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _workers(args, cfg: RunConfig) -> int:
    if getattr(args, "workers", None):
        return int(args.workers)
    if "workers" in cfg.experiment:
        return int(cfg.experiment["workers"])
    env = os.environ.get(ENV_WORKERS, "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError as e:
        raise ConfigError(f"{ENV_WORKERS} must be an integer, got {env!r}") from e


# ---------------------------------------------------------------- data loading


def impute_mean_mode(cols: dict, names) -> dict:
    """Fill missing covariate cells: mode for 0/1 columns, mean otherwise."""
    out = dict(cols)
    for name in names:
        raw = [s.strip() for s in cols[name]]
        present = [float(s) for s in raw if s not in _MISSING]
        if not present:
            raise ParseError(f"column {name!r} has no observed values to impute from")
        if len(present) == len(raw):
            continue
        arr = np.array(present)
        if np.all((arr == 0) | (arr == 1)):
            fill = 1.0 if arr.sum() > arr.size / 2 else 0.0
        else:
            fill = float(arr.mean())
        out[name] = [repr(fill) if s in _MISSING else s for s in raw]
    return out


def infer_schema(cols: dict) -> ColumnSchema:
    """Schema for files without a ``[data]`` section.

    Requires ``cluster``, ``treatment`` and ``outcome`` columns; every other
    column is cluster-level when constant within each cluster and
    individual-level otherwise.
    """
    for c in ("cluster", "treatment", "outcome"):
        if c not in cols:
            raise ConfigError(f"no [data] schema given and the file has no {c!r} column")
    cluster = np.array([s.strip() for s in cols["cluster"]])
    individual, cluster_level = [], []
    for name, values in cols.items():
        if name in ("cluster", "treatment", "outcome"):
            continue
        seen = {}
        constant = True
        for c, val in zip(cluster, values):
            if seen.setdefault(c, val) != val:
                constant = False
                break
        (cluster_level if constant else individual).append(name)
    return ColumnSchema("cluster", "treatment", "outcome", tuple(individual), tuple(cluster_level))


def _load(args, cfg: RunConfig):
    path = args.data or cfg.data.get("path")
    if not path:
        raise ConfigError("no dataset given; pass --data or set [data] path")
    cols = read_csv_columns(path)
    roles = {"cluster", "treatment", "outcome"}
    if roles & set(cfg.data):
        missing = sorted(roles - set(cfg.data))
        if missing:
            raise ConfigError(f"[data] is missing key(s): {', '.join(missing)}")
        schema = ColumnSchema.from_mapping(cfg.data)
    else:
        schema = infer_schema(cols)
    if getattr(args, "impute_mean_mode", False):
        cols = impute_mean_mode(cols, schema.individual + schema.cluster_level)
    ds = load_dataset(path, schema, append_cluster_size=bool(cfg.data.get("append_cluster_size", False)), columns=cols)
    return ds, schema


def _read_cate(path) -> CateEstimate:
    try:
        return CateEstimate.from_csv(path)
    except KeyError as e:
        raise ParseError(f"{path}: missing column {e}") from e


def read_draw_contrasts(path, treatment) -> np.ndarray:
    """Per-draw CATEs ``S x n`` from a long draws CSV and the observed arms."""
    cols = read_csv_columns(path)
    d = np.array([int(s) for s in cols["draw"]])
    u = np.array([int(s) for s in cols["unit"]])
    surf = np.array([float(s) for s in cols["surface"]])
    cf = np.array([float(s) for s in cols["counterfactual"]])
    S, n = d.max() + 1, u.max() + 1
    if n != len(treatment):
        raise ParseError(f"{path}: draws cover {n} units, dataset has {len(treatment)}")
    out = np.zeros((S, n))
    sign = np.where(np.asarray(treatment) == 1, 1.0, -1.0)
    out[d, u] = (surf - cf) * sign[u]
    return out


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if cfg.scenario is None:
        raise ConfigError("simulate needs a [scenario] section")
    if args.seed is not None:
        cfg.scenario = cfg.scenario.replace(seed=args.seed)
    out = _outdir(args, cfg)
    truth = generate(cfg.scenario, substream(cfg.scenario.seed))
    schema = save_dataset(truth.dataset, out / "data.csv")
    ds = truth.dataset
    with open(out / "truth.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["unit", "cluster", "tau_true", "f0_true", "b_true"])
        for i in range(ds.n):
            c = int(ds.cluster_id[i])
            w.writerow([i, c, repr(float(truth.tau_true[i])), repr(float(truth.f0_true[i])), repr(float(truth.b_true[c]))])
    cfg.data = {"path": "data.csv", **_schema_dict(schema)}
    _write_resolved(cfg, out)
    print(f"wrote {ds.n} rows in {ds.n_clusters} clusters to {out}")
    return 0


def _schema_dict(schema: ColumnSchema) -> dict:
    return {
        "cluster": schema.cluster, "treatment": schema.treatment, "outcome": schema.outcome,
        "individual": list(schema.individual), "cluster_level": list(schema.cluster_level),
    }


def _pick_method(args, cfg: RunConfig) -> MethodSpec:
    name = args.method
    if name is None:
        if len(cfg.methods) != 1:
            raise ConfigError("pass --method or give exactly one [method.<label>] section")
        m = cfg.methods[0]
    else:
        found = [m for m in cfg.methods if m.display == name or (m.name == name and not m.label)]
        m = found[0] if found else make_method(name) if name in METHODS else None
        if m is None:
            raise ConfigError(f"unknown method {name!r}; expected one of {', '.join(METHODS)}")
    if args.bootstrap is not None:
        if m.name not in ("merf", "gpb", "megb"):
            raise ConfigError(f"--bootstrap applies to merf, gpb and megb, not {m.name}")
        m = dataclasses.replace(m, bootstrap=int(args.bootstrap))
    if args.cluster_weighted:
        if m.name != "cf":
            raise ConfigError("--cluster-weighted applies to cf only")
        m = dataclasses.replace(m, config=m.config.replace(cluster_weighted=True))
    return m


def cmd_fit(args) -> int:
    cfg = load_config(args.config)
    m = _pick_method(args, cfg)
    ds, schema = _load(args, cfg)
    out = _outdir(args, cfg)
    seed = args.seed if args.seed is not None else int(cfg.experiment.get("seed", 0))
    rng = substream(seed)
    if m.name in ("ribart", "mbcf"):
        draws = fit_ribart(ds, m.config, rng) if m.name == "ribart" else fit_mbcf(ds, m.config, rng)
        est = cate_from_draws(draws)
        if args.export_draws:
            draws.to_csv(out / f"draws_{m.display}.csv")
        _write_posterior_summary(draws, out / f"ate_{m.display}.csv")
    else:
        if args.export_draws:
            raise ConfigError("--export-draws applies to ribart and mbcf only")
        est = m.run(ds, rng, workers=_workers(args, cfg))
    est.to_csv(out / f"cate_{m.display}.csv", ds.cluster_id)
    cfg.methods = [m]
    cfg.data = {**_schema_dict(schema), **{k: v for k, v in cfg.data.items() if k in ("append_cluster_size",)},
                "path": str(args.data or cfg.data.get("path"))}
    _write_resolved(cfg, out, experiment={"seed": seed})
    print(f"{m.display}: mean CATE {est.point.mean():.4f} over {len(est)} units -> {out / f'cate_{m.display}.csv'}")
    return 0


def _write_posterior_summary(draws: PosteriorDraws, path: Path) -> None:
    rows = [("ate", *posterior_ate(draws)), ("icc", *mbcf_icc_posterior(draws))]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["quantity", "mean", "lo95", "hi95"])
        for name, mean, lo, hi in rows:
            w.writerow([name, repr(mean), repr(lo), repr(hi)])


def cmd_evaluate(args) -> int:
    est = _read_cate(args.cate)
    cols = read_csv_columns(args.truth)
    tau = np.array([float(s) for s in cols["tau_true"]])
    metrics = score(est, tau)
    out = Path(args.out) if args.out else None
    lines = [(k, repr(float(v))) for k, v in metrics.items()]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["metric", "value"])
            w.writerows(lines)
    for k, v in lines:
        print(f"{k},{v}")
    return 0


def cmd_experiment(args) -> int:
    cfg = load_config(args.config)
    if cfg.scenario is None:
        raise ConfigError("experiment needs a [scenario] section")
    if not cfg.methods:
        raise ConfigError("experiment needs at least one [method.<label>] section")
    if "seed" in cfg.experiment:
        cfg.scenario = cfg.scenario.replace(seed=int(cfg.experiment["seed"]))
    if args.seed is not None:
        cfg.scenario = cfg.scenario.replace(seed=args.seed)
    reps = int(args.reps or cfg.experiment.get("reps", 1))
    workers = _workers(args, cfg)
    out = _outdir(args, cfg)
    result = run_experiment(cfg.scenario, cfg.methods, reps, workers=workers)
    result.write(out, svg=bool(cfg.output.get("svg", True)))
    cfg.experiment = {**cfg.experiment, "reps": reps, "seed": cfg.scenario.seed}
    _write_resolved(cfg, out)
    for m in result.methods:
        r = result.reports[m]
        print(f"{m}: PEHE {r.pehe:.4f} coverage {r.coverage:.3f} over {r.n_reps} reps ({r.n_failed} failed)")
    return 0


def _tevim_projector(t: dict) -> BartConfig:
    kw = {k: t[k] for k in ("n_trees", "burn_in", "n_draws") if k in t}
    return PROJECTOR_DEFAULTS.replace(**kw)


def cmd_tevim(args) -> int:
    cfg = load_config(args.config)
    ds, _ = _load(args, cfg)
    est = _read_cate(args.cate)
    if len(est) != ds.n:
        raise ConstraintViolation(f"{args.cate} has {len(est)} units, dataset has {ds.n}")
    t = dict(cfg.tevim)
    projector = args.projector or t.get("projector", "bart")
    k = int(args.k or t.get("k", 10))
    seed = args.seed if args.seed is not None else int(t.get("seed", 0))
    res = tevim(est.point, ds.covariates(), ds.covariate_names, projector=projector,
                projector_cfg=_tevim_projector(t), seed=seed, k=k)
    out = _outdir(args, cfg)
    res.write(out)
    cfg.tevim = {**t, "projector": projector, "k": k, "seed": seed}
    _write_resolved(cfg, out)
    for name in res.ranking():
        print(f"{name},{float(res.scores[ds.covariate_names.index(name)])!r}")
    return 0


def cmd_subgroups(args) -> int:
    cfg = load_config(args.config)
    ds, _ = _load(args, cfg)
    est = _read_cate(args.cate)
    if len(est) != ds.n:
        raise ConstraintViolation(f"{args.cate} has {len(est)} units, dataset has {ds.n}")
    t = dict(cfg.tevim)
    names = ds.covariate_names
    top_k = int(args.top_k or t.get("top_k", 6))
    if args.covariates:
        chosen = [c.strip() for c in args.covariates.split(",") if c.strip()]
    elif args.tevim:
        cols = read_csv_columns(args.tevim)
        scores = np.array([float(s) for s in cols["score"]])
        order = np.argsort(-scores, kind="stable")[:top_k]
        chosen = [cols["covariate"][j] for j in order]
    else:
        chosen = list(names)
    unknown = [c for c in chosen if c not in names]
    if unknown:
        raise ConfigError(f"unknown covariate(s): {', '.join(unknown)}")
    z = ds.covariates()[:, [names.index(c) for c in chosen]]
    draws = read_draw_contrasts(args.draws, ds.treatment) if args.draws else None
    depth = int(args.depth if args.depth is not None else t.get("depth", 2))
    min_leaf = int(t.get("min_leaf", 7))
    tree = fit_the_fit(est.point, z, cate_draws=draws, names=chosen, depth=depth, min_leaf=min_leaf)
    out = _outdir(args, cfg)
    tree.write_json(out / "subgroups.json")
    cfg.tevim = {**t, "top_k": top_k, "depth": depth, "min_leaf": min_leaf}
    _write_resolved(cfg, out)
    if depth > 2:
        print("note: trees deeper than two levels are exploratory", file=sys.stderr)
    for leaf in tree.terminal:
        print(f"leaf {int(leaf)}: n={int(tree.node_size[leaf])} mean={tree.node_mean[leaf]:.4f} "
              f"[{tree.node_lo[leaf]:.4f}, {tree.node_hi[leaf]:.4f}]")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crthte", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--out", help="output directory (overrides [output] directory)")
        if data:
            sp.add_argument("--data", help="trial CSV (overrides [data] path)")
            sp.add_argument("--impute-mean-mode", action="store_true",
                            help="fill missing covariates with the mean, or the mode for 0/1 columns")

    sp = sub.add_parser("simulate", help="draw one trial from a scenario")
    common(sp, data=False)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="fit one learner and write per-unit CATEs")
    common(sp)
    sp.add_argument("--method", help=f"one of {', '.join(METHODS)} or a [method.<label>] label")
    sp.add_argument("--bootstrap", type=int, help="cluster bootstrap replicates (merf, gpb, megb)")
    sp.add_argument("--export-draws", action="store_true", help="write posterior draws (ribart, mbcf)")
    sp.add_argument("--cluster-weighted", action="store_true", help="weight rows by 1/N_i in the causal forest")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("evaluate", help="score a CATE file against simulated truth")
    sp.add_argument("--cate", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("experiment", help="Monte Carlo comparison of several learners")
    common(sp, data=False)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("tevim", help="leave-one-covariate-out importance of fitted CATEs")
    common(sp)
    sp.add_argument("--cate", required=True)
    sp.add_argument("--projector", choices=("bart", "knn"))
    sp.add_argument("--k", type=int, help="neighbours for the k-NN projector")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_tevim)

    sp = sub.add_parser("subgroups", help="shallow CART summary of fitted CATEs")
    common(sp)
    sp.add_argument("--cate", required=True)
    sp.add_argument("--draws", help="draws CSV from fit --export-draws, for node intervals")
    sp.add_argument("--tevim", help="tevim.csv used to pick the top covariates")
    sp.add_argument("--top-k", type=int)
    sp.add_argument("--covariates", help="comma-separated covariates (overrides --tevim)")
    sp.add_argument("--depth", type=int)
    sp.set_defaults(func=cmd_subgroups)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ConstraintViolation, ParseError, DomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CrtHteError, OSError, RuntimeError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
