"""Mixed-effects tree learners for heterogeneous effects in cluster-randomized trials."""

from .data import CateEstimate, ClusteredDataset, VarianceComponents, load_dataset, save_dataset
from .dgp import ScenarioSpec, generate
from .errors import BootstrapDegenerate, ConfigError, ConstraintViolation, CrtHteError, DomainError, ParseError
from .eval import cluster_bootstrap, run_experiment
from .methods import METHODS, make_method

__version__ = "0.1.0"

__all__ = [
    "CateEstimate",
    "ClusteredDataset",
    "VarianceComponents",
    "load_dataset",
    "save_dataset",
    "ScenarioSpec",
    "generate",
    "run_experiment",
    "cluster_bootstrap",
    "make_method",
    "METHODS",
    "CrtHteError",
    "DomainError",
    "ConstraintViolation",
    "ParseError",
    "ConfigError",
    "BootstrapDegenerate",
    "__version__",
]
