"""Exception hierarchy.

Two umbrella classes map onto CLI exit codes: :class:`ConfigError` (2) and
:class:`NumericalError` (3).
"""


class VolterraError(Exception):
    """Base class for all package errors."""


class ConfigError(VolterraError, ValueError):
    """Invalid configuration or precondition violation."""


class NumericalError(VolterraError, ArithmeticError):
    """A numerical procedure failed (non-finite state, no convergence, ...)."""


# kernels
class SingularAtDiagonal(ConfigError):
    pass


class OutOfDomain(ConfigError):
    pass


class VarianceMatchedUndefined(ConfigError):
    pass


class SingularKernelRejected(ConfigError):
    pass


class QuadratureFailure(NumericalError):
    pass


# coefficients
class DimensionMismatch(ConfigError):
    pass


class MeasureRequired(ConfigError):
    pass


# measures
class LengthMismatch(ConfigError):
    pass


class TooLarge(ConfigError):
    pass


# engine
class NonFiniteState(NumericalError):
    def __init__(self, path: int, step: int):
        super().__init__(f"non-finite state at path {path}, step {step}")
        self.path = path
        self.step = step


class InvalidDiagnostic(ConfigError):
    pass


# mckean
class NotConverged(NumericalError):
    def __init__(self, gap_history):
        last = gap_history[-1] if gap_history else float("nan")
        super().__init__(f"Picard iteration did not converge after {len(gap_history)} "
                         f"iterations (last gap {last:.3e})")
        self.gap_history = list(gap_history)


class AdmissibilityError(ConfigError):
    pass


class ReferenceTooSmall(ConfigError):
    pass


# harness
class NonPositiveEpsilon(ConfigError):
    pass


class InsufficientPaths(ConfigError):
    pass


# yamada-watanabe
class XiOutOfRange(ConfigError):
    pass


class InfeasibleBound(NumericalError):
    pass
