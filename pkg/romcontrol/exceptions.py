"""Custom exceptions for romcontrol."""

from typing import Optional

import numpy as np


class RomControlError(Exception):
    """Base exception for romcontrol errors."""

    exit_code = 1


class ConfigurationError(RomControlError):
    """Exception raised for invalid specs, configs, or mismatched layouts."""

    exit_code = 2


class TrajectoryEscapeError(RomControlError):
    """Exception raised when an integrated state becomes NaN or infinite."""

    exit_code = 3

    def __init__(self, message: str, time: float) -> None:
        """Initialize the escape error.

        Args:
            message: Error message.
            time: First time at which a non-finite state was observed.
        """
        super().__init__(f"{message} (t={time:.6g})")
        self.time = time


class DivergenceError(RomControlError):
    """Exception raised when the training loss or gradient stops being finite."""

    exit_code = 3

    def __init__(self, message: str, last_good: Optional[np.ndarray], iteration: int) -> None:
        """Initialize the divergence error.

        Args:
            message: Error message.
            last_good: Last control parameters with a finite loss, if any.
            iteration: Iteration at which the divergence was detected.
        """
        super().__init__(message)
        self.last_good = last_good
        self.iteration = iteration


class SolverError(RomControlError):
    """Exception raised when an integrator exceeds its step budget or its step underflows."""

    exit_code = 3


class SingularSystemError(RomControlError):
    """Exception raised when a Gram system stays singular after ridge escalation."""

    exit_code = 3


class FitError(RomControlError):
    """Exception raised when an initial fit misses its tolerance and the caller needs success."""

    exit_code = 4

    def __init__(self, message: str, misfit: float) -> None:
        """Initialize the fit error.

        Args:
            message: Error message.
            misfit: Achieved relative L2 misfit.
        """
        super().__init__(message)
        self.misfit = misfit


class CFLError(ConfigurationError):
    """Exception raised when an explicit scheme's time step violates the CFL condition."""

    def __init__(self, message: str, required_steps: int) -> None:
        """Initialize the CFL error.

        Args:
            message: Error message.
            required_steps: Smallest number of time steps that satisfies the condition.
        """
        super().__init__(message)
        self.required_steps = required_steps
