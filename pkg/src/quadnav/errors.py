"""Exception types shared across the package."""


class QuadnavError(Exception):
    """Base class for all package errors."""


class ConfigError(QuadnavError, ValueError):
    pass


class InsufficientDataError(QuadnavError, ValueError):
    pass


class DomainError(QuadnavError, ValueError):
    pass


class SimulationDiverged(QuadnavError, RuntimeError):
    """Raised when the low-level integration produces a non-finite state."""

    def __init__(self, axis, step, value):
        self.axis = axis
        self.step = step
        self.value = value
        super().__init__(
            f"simulation diverged on axis {'xyz'[axis]} at inner step {step} (value={value!r})"
        )


class TrainingDiverged(QuadnavError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)


class InstabilityError(QuadnavError, RuntimeError):
    def __init__(self, step, cfl):
        self.step = step
        self.cfl = cfl
        super().__init__(f"non-finite value in level-set update at step {step} (cfl={cfl})")
