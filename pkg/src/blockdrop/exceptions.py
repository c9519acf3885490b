"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside the domain of a function (e.g. log of 0)."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class BlockLookupError(LookupError):
    """A block identity tag is not present in the stack."""


class MappingError(KeyError):
    """A student block has no teacher counterpart."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class NumericError(ArithmeticError):
    """A loss term or quantity became non-finite."""


class TrainingError(RuntimeError):
    """Optimisation diverged."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
