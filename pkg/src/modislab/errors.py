"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown config field."""


class ShapeError(ValueError):
    """Input tensor/array does not match the expected shape or modality."""


class StratificationError(ValueError):
    """A (class, modality) stratum is too small for the requested split."""


class DegenerateKernelError(ValueError):
    """All pairwise distances are zero; the kernel bandwidth is undefined."""


class NumericalError(RuntimeError):
    """A loss or update produced a non-finite value."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
