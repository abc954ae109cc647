"""Exception hierarchy shared by every module."""


class CrtHteError(Exception):
    """Base class for all package errors."""


class DomainError(CrtHteError, ValueError):
    """An argument lies outside the domain of an operation."""


class ConstraintViolation(CrtHteError, ValueError):
    """Input data breaks a structural invariant of the trial design."""


class ParseError(CrtHteError, ValueError):
    """A data file could not be parsed into the data model."""


class ConfigError(CrtHteError, ValueError):
    """A run configuration is malformed or names unknown keys."""


class BootstrapDegenerate(CrtHteError, RuntimeError):
    """Too many cluster-bootstrap resamples contained a single arm."""
