"""Exception types shared across the package.

Each class maps to one CLI exit code (see ``sgdiff.cli``).
"""


class ValidationError(ValueError):
    """Input data violates a documented invariant (exit code 1)."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared during training or sampling (exit code 2)."""


class ConfigError(ValueError):
    """Unknown config key or config/checkpoint hash mismatch (exit code 3)."""
