"""Exception hierarchy shared by all pipefit modules."""


class PipefitError(Exception):
    """Base class for every error raised by pipefit."""


class DegenerateGeometry(PipefitError):
    pass


class NotAnEllipse(PipefitError):
    pass


class EmptySlab(PipefitError):
    pass


class InsufficientSupport(PipefitError):
    pass


class NoConvergence(PipefitError):
    pass


class NoTargetsFound(PipefitError):
    pass


class AmbiguousMatch(PipefitError):
    pass


class InsufficientViews(PipefitError):
    pass


class BehindCamera(PipefitError):
    pass


class IllConditioned(PipefitError):
    pass


class AlreadyMetric(PipefitError):
    pass


class Unregistered(PipefitError):
    pass


class BandUnreachable(PipefitError):
    pass


class BackendFailure(PipefitError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration


class OutOfFrustum(PipefitError):
    pass


class ZeroTruth(PipefitError):
    pass


class ConfigError(PipefitError):
    pass
