"""Exception hierarchy shared by every gnnmerge module."""


class GnnMergeError(Exception):
    """Base class; the CLI maps any subclass to exit code 2."""


class ShapeError(GnnMergeError, ValueError):
    pass


class SingularityError(GnnMergeError, ArithmeticError):
    def __init__(self, message, ridge=None):
        super().__init__(message)
        self.ridge = ridge


class FormatError(GnnMergeError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ParameterError(GnnMergeError, ValueError):
    pass


class ConfigurationError(GnnMergeError, ValueError):
    pass


class IncompatibilityError(GnnMergeError, ValueError):
    pass


class NumericError(GnnMergeError, ArithmeticError):
    pass


class OptimizationError(GnnMergeError, RuntimeError):
    pass
