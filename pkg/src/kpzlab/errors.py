"""Exception types shared across the laboratory."""


class ConfigurationError(ValueError):
    """A parameter set violates a documented constraint."""


class CalibrationError(RuntimeError):
    """Covariance tail calibration failed its residual gate."""


class ContractError(RuntimeError):
    """An operation was called with inputs violating its contract."""


class SimulationDivergedError(RuntimeError):
    """A solver produced a non-finite frame; carries the offending step."""

    def __init__(self, step_index: int, time: float):
        self.step_index = step_index
        self.time = time
        super().__init__(f"simulation diverged at step {step_index} (t = {time:g})")


class ResolutionError(RuntimeError):
    """A quadrature self-error estimate exceeded its gate."""
