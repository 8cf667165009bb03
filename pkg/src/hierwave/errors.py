"""Exception types shared across the package."""

from __future__ import annotations


class ConfigurationError(ValueError):
    """Invalid parameter combination (domain, grid, CFL, config file)."""


class InstabilityError(RuntimeError):
    """Time stepping produced non-finite values."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ConvergenceError(RuntimeError):
    """A fixed-point iteration failed to converge."""

    def __init__(self, message: str, residual_history: list[float] | None = None):
        super().__init__(message)
        self.residual_history = residual_history or []


class InfeasibleError(ValueError):
    """A quantity was requested at an infeasible control (targets not reached)."""
