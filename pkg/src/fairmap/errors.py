"""Exception hierarchy shared across the package."""


class FairmapError(Exception):
    """Base class for all package-specific errors."""


class EmptyDatasetError(FairmapError):
    """Dataset has no records (possibly after ingestion filters)."""


class MissingOutcomeError(FairmapError):
    """An operation requiring outcome labels met a record without one."""


class UnknownVariableError(FairmapError, KeyError):
    """A variable name is not part of the schema."""


class SupportMismatchError(FairmapError):
    """Two distributions do not live on the same support."""


class ZeroReferenceError(FairmapError, ZeroDivisionError):
    """Ratio distance asked for with a zero reference probability."""


class AbsentRowError(FairmapError):
    """A conditional row was requested for a zero-mass given-cell."""


class MissingBudgetError(FairmapError):
    """No distortion budget defined for a positive-mass input cell."""


class InvalidParamsError(FairmapError, ValueError):
    """Parameters outside their mathematical domain."""


class LengthMismatchError(FairmapError):
    """Paired datasets/records do not align."""


class NumericalBreakdownError(FairmapError):
    """The solver cannot make progress (e.g. unbounded KL objective)."""


class ProvenanceMismatchError(FairmapError):
    """Artifact fingerprint does not match the active configuration."""


class SchemaMismatchError(FairmapError):
    """Data or artifact does not conform to the configured schema."""


class ConfigError(FairmapError):
    """Pipeline configuration is malformed or inconsistent."""
