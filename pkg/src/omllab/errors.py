"""Exception hierarchy shared by all omllab modules."""


class OmlLabError(Exception):
    """Base class for every error raised by omllab."""


class DimensionError(OmlLabError, ValueError):
    """Operand shapes are not conformable."""


class NumericError(OmlLabError, ArithmeticError):
    """A computation produced NaN or Inf."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class DivergenceError(NumericError):
    """Meta-gradient norm exceeded the divergence threshold."""


class ContractError(OmlLabError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(OmlLabError, ValueError):
    """Invalid configuration; ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class DataError(OmlLabError, ValueError):
    """Dataset cannot satisfy the requested sampling."""


class IngestionError(OmlLabError, OSError):
    """A dataset file could not be read or decoded."""

    def __init__(self, path, reason):
        super().__init__(f"cannot ingest {path}: {reason}")
        self.path = path


class SweepError(OmlLabError, RuntimeError):
    """Every candidate learning rate diverged."""
