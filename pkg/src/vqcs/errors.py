"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid dimensions, hyperparameters, or experiment configuration."""


class ShapeError(ValueError):
    """Array arguments whose shapes do not match the declared contract."""


class DomainError(ValueError):
    """Input values outside the mathematical domain of an operation."""


class ProtocolError(ValueError):
    """Malformed wire data: out-of-range indices, bad file headers."""


class StateError(RuntimeError):
    """Operation requires state that has not been populated yet."""


class DivergenceError(RuntimeError):
    """Training produced non-finite quantities.

    Carries the last finite checkpoint (if any) on the ``model`` and
    ``report`` attributes so callers can salvage partial progress.
    """

    def __init__(self, message, model=None, report=None):
        super().__init__(message)
        self.model = model
        self.report = report
