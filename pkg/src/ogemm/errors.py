"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class DegenerateDeviceError(DomainError):
    """A device has no usable transmittance modulation (t_diff == 0)."""


class ParseError(ValueError):
    """A data file could not be parsed."""


class StateError(RuntimeError):
    """An object was used in an invalid state (e.g. a stale forward cache)."""


class TrainingError(RuntimeError):
    """Training produced non-finite values."""


class ConfigurationError(RuntimeError):
    """The requested experiment cannot be set up with the given configuration."""


class NumericalError(RuntimeError):
    """A numerical routine failed (e.g. Cholesky of an ill-conditioned kernel)."""
