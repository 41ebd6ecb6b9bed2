"""Exception types shared across the package."""


class UncertainError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(UncertainError, ValueError):
    """Operands have incompatible shapes."""


class DomainError(UncertainError, ValueError):
    """Input lies outside the mathematical domain of an operation."""


class TapeError(UncertainError, RuntimeError):
    """Misuse of the differentiation tape (detached tensor, non-scalar root)."""


class NotPositiveDefiniteError(UncertainError, RuntimeError):
    """Cholesky factorization failed even after jitter escalation."""


class NotReversibleError(UncertainError, TypeError):
    """A reverse computation was requested from a layer that has none."""


class LayerError(UncertainError, RuntimeError):
    """A sub-layer failed; the message carries the layer index."""


class ConfigError(UncertainError, ValueError):
    """Malformed configuration file or invalid configuration value."""


class DataError(UncertainError, ValueError):
    """Malformed dataset file."""


class CheckpointError(UncertainError, ValueError):
    """Malformed or truncated checkpoint file."""


class TrainingError(UncertainError, RuntimeError):
    """Training cannot proceed (missing likelihood, non-finite loss)."""
