"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: configuration and data-integrity
problems exit with 2, numeric failures with 3.
"""


class IntegrityError(ValueError):
    """Input data is malformed or references unknown ids."""


class ConfigError(ValueError):
    """A configuration value is missing, out of range or inconsistent."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class NumericError(ArithmeticError):
    """NaN or Inf encountered in a loss, gradient or parameter."""


class UndefinedMetricError(ValueError):
    """Metric is undefined for the given input (e.g. AUC with one class)."""
