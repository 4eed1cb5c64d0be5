"""Exception hierarchy shared by all mlab modules."""


class MlabError(Exception):
    """Base class for every error raised by mlab."""


class ProfileError(MlabError, ValueError):
    """A curvature profile is malformed (non-finite, positive, bad parameters)."""


class SolverFailure(MlabError, RuntimeError):
    """The Jacobi ODE integrator could not reach the requested radius."""

    def __init__(self, message: str, radius: float):
        super().__init__(f"{message} (at r={radius:.6g})")
        self.radius = radius


class WarpDomainError(MlabError, ValueError):
    """A warp function was evaluated outside (0, r_max]."""


class ConfigError(MlabError, ValueError):
    """An experiment, policy or path configuration violates an invariant."""


class NumericalError(MlabError, ArithmeticError):
    """A simulated state became non-finite."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class LogicError(MlabError, RuntimeError):
    """A detector was applied to input outside its regime."""


class StepFailure(MlabError, RuntimeError):
    """The pole guard rejected a step more often than the retry budget allows."""

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state
