"""Exception types shared across the package."""


class InputError(ValueError):
    """Caller-supplied data is invalid (bad token ids, empty corpus, ...)."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ShapeError(ContractError):
    """Tensor shapes are not conformable for the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""
