"""Uniform ``fit -> CateEstimate`` wrappers around every learner.

Bayesian learners report posterior intervals, the causal forest its own
little-bags variance, and the S-learner forests and boosters percentile
intervals from the cluster bootstrap.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .bart import BartConfig, cate_from_draws, fit_ribart
from .bcf import BcfConfig, fit_mbcf
from .boost import BoostConfig, cate_boost, fit_boost
from .data import CateEstimate, ClusteredDataset
from .ensembles import CfConfig, MerfConfig, cate_merf, fit_causal_forest, fit_merf
from .errors import ConfigError

__all__ = ["METHODS", "MethodSpec", "make_method", "method_key", "config_class"]

METHODS = ("ribart", "mbcf", "merf", "cf", "gpb", "megb")
_FREQUENTIST = ("merf", "gpb", "megb")


def config_class(name: str):
    return {
        "ribart": BartConfig,
        "mbcf": BcfConfig,
        "merf": MerfConfig,
        "cf": CfConfig,
        "gpb": BoostConfig,
        "megb": BoostConfig,
    }[name]


def method_key(name: str) -> int:
    """Stable integer used to address a method's random substream."""
    return zlib.crc32(name.encode("utf-8"))


def _merf_predict(cfg, train: ClusteredDataset, x, v, seed):
    return cate_merf(fit_merf(train, cfg, seed), x, v)


def _boost_predict(cfg, train: ClusteredDataset, x, v, seed):
    return cate_boost(fit_boost(train, cfg, seed), x, v)


@dataclass(frozen=True)
class MethodSpec:
    name: str
    config: object
    bootstrap: int = 200
    label: str = ""
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def display(self) -> str:
        return self.label or self.name

    def point_procedure(self):
        """``(train, x, v, seed) -> tau_hat`` for the S-learners, used by the bootstrap."""
        if self.name == "merf":
            return partial(_merf_predict, self.config)
        if self.name in ("gpb", "megb"):
            return partial(_boost_predict, self.config)
        raise ConfigError(f"{self.name} has no bootstrap point procedure")

    def run(self, data: ClusteredDataset, seed, workers: int = 1) -> CateEstimate:
        if self.name == "ribart":
            return cate_from_draws(fit_ribart(data, self.config, seed))
        if self.name == "mbcf":
            return cate_from_draws(fit_mbcf(data, self.config, seed))
        if self.name == "cf":
            return fit_causal_forest(data, self.config, seed).predict()
        from .eval import cluster_bootstrap

        proc = self.point_procedure()
        if self.bootstrap > 0:
            est = cluster_bootstrap(proc, data, B=self.bootstrap, seed=seed, workers=workers)
        else:
            p = proc(data, data.x, data.v, seed)
            est = CateEstimate(p, p, p)
        return dataclasses.replace(est, method=self.name)


def make_method(name: str, bootstrap: int = 200, label: str = "", **overrides) -> MethodSpec:
    """Build a method with module defaults overridden by ``overrides``."""
    if name not in METHODS:
        raise ConfigError(f"unknown method {name!r}; expected one of {', '.join(METHODS)}")
    cls = config_class(name)
    known = {f.name for f in dataclasses.fields(cls)}
    bad = sorted(set(overrides) - known)
    if bad:
        raise ConfigError(f"unknown key(s) for method {name}: {', '.join(bad)}")
    if name in ("gpb", "megb"):
        overrides = {**overrides, "variant": "GPB" if name == "gpb" else "MEGB"}
    try:
        cfg = cls(**overrides)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"method {name}: {e}") from e
    if name not in _FREQUENTIST:
        bootstrap = 0
    return MethodSpec(name, cfg, int(bootstrap), label)
