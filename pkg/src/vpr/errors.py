"""Exception hierarchy shared by every module of the package."""


class VprError(Exception):
    """Base class for all errors raised by the package."""


class DimensionError(VprError, ValueError):
    pass


class DomainError(VprError, ValueError):
    pass


class SizeError(VprError, ValueError):
    pass


class StabilityError(VprError):
    """Raised when a finite-difference run would violate the CFL bound."""


class SupportError(VprError):
    """New-prior support is not contained in the old-prior support."""

    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = list(indices)


class DegenerateDataError(VprError, ValueError):
    pass


class NotSPDError(VprError, ValueError):
    pass


class FormatError(VprError, ValueError):
    pass


class ConfigError(VprError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NonFiniteGradientError(VprError, FloatingPointError):
    def __init__(self, message, sample_seed=None):
        super().__init__(message)
        self.sample_seed = sample_seed


class ContractViolation(VprError, RuntimeError):
    """An internal invariant (e.g. zero forward simulations in VPR) was broken."""
