"""Finite-element solvers for the cubic Schrodinger equation with
time-dependent dispersion, nonlinearity and linear damping/forcing, plus a
verification harness for discrete mass and energy balance laws."""

__version__ = "0.1.0"

from .errors import ConfigurationError, SolverError, StepError

__all__ = ["ConfigurationError", "SolverError", "StepError", "__version__"]
