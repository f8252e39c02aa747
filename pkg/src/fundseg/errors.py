"""Exception hierarchy shared by all modules."""


class FundsegError(Exception):
    """Base class; the CLI maps any subclass to a nonzero exit status."""


class DimensionError(FundsegError, ValueError):
    pass


class ContractError(FundsegError, ValueError):
    pass


class ConfigurationError(FundsegError, ValueError):
    pass


class GeometryError(FundsegError, ValueError):
    pass


class StarShapeError(GeometryError):
    def __init__(self, message, angle_index=None):
        super().__init__(message)
        self.angle_index = angle_index


class UndefinedRatioError(FundsegError, ZeroDivisionError):
    pass


class EvaluationError(FundsegError, ArithmeticError):
    pass


class GradingError(FundsegError, ValueError):
    pass


class TrainingError(FundsegError, RuntimeError):
    def __init__(self, message, last_finite_iteration=None):
        super().__init__(message)
        self.last_finite_iteration = last_finite_iteration


class FormatError(FundsegError, ValueError):
    """Malformed file; message carries the path and line or byte offset."""
