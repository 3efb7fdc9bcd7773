"""Exception types raised by gpff."""

import numpy as np


class IllConditionedError(np.linalg.LinAlgError):
    """The regularized Gram matrix could not be factorized."""

    def __init__(self, message, jitters=()):
        super().__init__(message)
        self.jitters = tuple(jitters)


class OptimizationFailedError(RuntimeError):
    """Every optimizer restart failed."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class DivergenceError(RuntimeError):
    """The closed-loop simulation blew up."""


class InfeasibleTrajectoryError(ValueError):
    """The requested motion bounds cannot produce a trajectory."""


class ConfigError(ValueError):
    """An experiment configuration failed validation."""
