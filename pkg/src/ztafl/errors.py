"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation expects."""


class InvalidInputError(ValueError):
    """Arguments violate an operation's preconditions."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where finite numbers are required."""


class InvalidStateError(RuntimeError):
    """Operation is not allowed in the object's current state."""
