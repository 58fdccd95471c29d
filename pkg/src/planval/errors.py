"""Exception types shared across planval."""


class PlanvalError(Exception):
    """Base class for all planval errors."""


class CapacityError(PlanvalError):
    """An enumeration or buffer exceeds its configured limit."""


class ShapeError(PlanvalError, ValueError):
    """Array shapes do not line up."""


class NumericError(PlanvalError, FloatingPointError):
    """A non-finite value showed up where finite values are required."""


class StateError(PlanvalError, RuntimeError):
    """An object was used before it was ready (or after it was finished)."""


class ContractError(PlanvalError):
    """A caller broke a usage contract, e.g. fed model states to the actor."""


class ConfigError(PlanvalError, ValueError):
    """Bad or unknown configuration entry."""


class DegenerateInputError(PlanvalError, ValueError):
    """Input makes the requested quantity undefined (zero vector, zero mean)."""


class PreconditionError(PlanvalError):
    """A documented precondition was not met."""


class ConvergenceError(PlanvalError):
    """Iteration hit its cap before reaching tolerance."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual
