"""Exception types raised across the package."""

from __future__ import annotations


class PanelDMLError(Exception):
    """Base class for all package errors."""


class ConfigError(PanelDMLError):
    pass


class SchemaError(PanelDMLError):
    pass


class DataError(PanelDMLError):
    pass


class ValidationError(PanelDMLError):
    """Input validation failure carrying every problem found, not just the first."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class SolverError(PanelDMLError):
    """A convex solve did not reach its optimality certificate."""


class SingularDesignError(PanelDMLError):
    pass


class TrainingError(PanelDMLError):
    """Neural network training produced a non-finite loss."""

    def __init__(self, message, seed=None, epoch=None):
        self.seed = seed
        self.epoch = epoch
        super().__init__(f"{message} (seed={seed}, epoch={epoch})")


class EstimationError(PanelDMLError):
    """A cross-fitted estimate could not be completed."""

    def __init__(self, message, fold=None):
        self.fold = fold
        suffix = "" if fold is None else f" [fold {fold}]"
        super().__init__(message + suffix)
