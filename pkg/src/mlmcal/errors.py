"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised when a config value or combination of values is invalid."""


class SamplingFailure(RuntimeError):
    """Raised when rejection sampling exhausts its retry budget.

    Attributes
    ----------
    iteration : int
        Zero-based refinement iteration at which the budget ran out.
    """

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration
