"""Error taxonomy shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """A configuration or input violates a documented invariant."""


class ContractError(RuntimeError):
    """An operation was invoked outside its documented preconditions."""


class NumericError(ArithmeticError):
    """A computation produced or consumed non-finite values."""
