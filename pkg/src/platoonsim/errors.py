"""Exception types shared across the simulator."""


class ModelError(ValueError):
    """Non-finite or out-of-domain vehicle state / input."""


class SingularLinearizationError(ModelError):
    """Linearization requested at |steer| = pi/2 where cos^2 vanishes."""


class QpInputError(ValueError):
    """QP matrices violate the solver's input contract (e.g. H not PSD)."""


class ConfigError(ValueError):
    """Invalid scenario / sweep configuration. Carries the offending field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class CollisionError(RuntimeError):
    """Bumper-to-bumper gap went negative during a run."""

    def __init__(self, step: int, t: float, vehicle: int, gap: float):
        self.step = step
        self.t = t
        self.vehicle = vehicle
        self.gap = gap
        super().__init__(
            f"collision at step {step} (t={t:.2f} s): vehicle {vehicle} gap {gap:.3f} m"
        )


class EmptyInputError(ValueError):
    """Metric requested over an empty series / zero-length trace."""
