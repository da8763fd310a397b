"""Exception types shared across the package."""


class FedDistillError(Exception):
    """Base class for all package errors."""


class ShapeError(FedDistillError, ValueError):
    """Tensor shape or dtype mismatch."""


class GraphError(FedDistillError, RuntimeError):
    """Misuse of the differentiation graph (non-scalar target, missing retention, ...)."""


class NumericError(FedDistillError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DataFormatError(FedDistillError, ValueError):
    """Malformed dataset or checkpoint bytes."""


class ConfigError(FedDistillError, ValueError):
    """Invalid experiment configuration; carries one message per offending field."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
