"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration value or unknown key."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ProtocolError(ConfigurationError):
    """Incremental protocol string does not match the object count."""


class IngestionError(ValueError):
    """Malformed on-disk dataset layout."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its precondition."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class NonFiniteLossError(NumericError):
    def __init__(self, step, iteration, components):
        self.step = step
        self.iteration = iteration
        self.components = dict(components)
        parts = ", ".join(f"{k}={v!r}" for k, v in self.components.items())
        super().__init__(
            f"non-finite loss at step {step}, iteration {iteration} ({parts})"
        )


class UndefinedMetricError(ValueError):
    """Metric is not defined for the given input (e.g. single-class AUROC)."""
