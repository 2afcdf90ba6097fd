"""Exception hierarchy shared by every module of the lab."""


class SlabError(Exception):
    """Base class for all errors raised by slab."""


class DomainError(SlabError, ValueError):
    """A field was queried outside its time horizon or spatial domain."""


class ConfigError(SlabError, ValueError):
    """Inconsistent or unknown configuration (flows, specs, scenario files)."""


class SimulationDivergedError(SlabError, FloatingPointError):
    """A simulated state became non-finite."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"simulation diverged: non-finite state at step {step}")


class EstimationError(SlabError, ValueError):
    """An estimator could not be computed from the available samples."""


class XiViolationError(SlabError, FloatingPointError):
    """The action integrand is not finite, so the process is outside the functional's domain."""
