"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid user-facing configuration: bad mesh bounds, unknown keys,
    cross-field violations, unknown scenario ids."""


class SolverError(RuntimeError):
    """A linear system could not be solved to the required accuracy."""


class StepError(RuntimeError):
    """A time step failed (singular stage system or non-converged
    nonlinear iteration).  Carries the step location for post-mortems."""

    def __init__(self, message: str, time: float, dt: float):
        super().__init__(f"{message} (t={time:.6g}, dt={dt:.6g})")
        self.time = time
        self.dt = dt
