"""Exception types shared across the package."""


class DiffPatrolError(Exception):
    """Base class for all package errors."""


class ScheduleError(DiffPatrolError):
    """Invalid noise schedule or step index outside [1, T]."""


class NumericError(DiffPatrolError):
    """Non-finite values encountered during sampling or optimization.

    Carries the reverse-process step index when raised inside a sampler.
    """

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"{message} (step t={step})"
        super().__init__(message)


class DegeneracyError(DiffPatrolError):
    """All particle weights collapsed to zero."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"{message} (step t={step})"
        super().__init__(message)


class TrainingError(DiffPatrolError):
    """Denoiser training diverged (NaN loss)."""

    def __init__(self, message: str, epoch: int | None = None):
        self.epoch = epoch
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)


class QuadraturePrecisionError(DiffPatrolError):
    """Quadrature grid too coarse for the requested computation."""


class GridCoarseError(DiffPatrolError):
    """Brute-force game grids too coarse: refinement moved the value."""


class GameSolveError(DiffPatrolError):
    """Matrix-game LP failed or produced an invalid equilibrium."""


class ConfigError(DiffPatrolError):
    """Malformed experiment or solver configuration."""
