"""Exception hierarchy shared by all graphtrack modules."""


class GraphTrackError(Exception):
    """Base class for every error raised by graphtrack."""


class DimMismatch(GraphTrackError, ValueError):
    pass


class ShapeMismatch(DimMismatch):
    pass


class NonSymmetric(GraphTrackError, ValueError):
    pass


class EigFailure(GraphTrackError, RuntimeError):
    pass


class InfeasibleDegree(GraphTrackError, ValueError):
    pass


class ConnectivityRetryExceeded(GraphTrackError, RuntimeError):
    pass


class DisconnectRetryExceeded(GraphTrackError, RuntimeError):
    pass


class NonFiniteState(GraphTrackError, FloatingPointError):
    """A filter or simulator produced NaN/Inf.

    ``t`` is the 1-based time index and ``index`` the trajectory index, when known.
    """

    def __init__(self, message, t=None, index=None):
        self.t = t
        self.index = index
        parts = [message]
        if index is not None:
            parts.append(f"trajectory={index}")
        if t is not None:
            parts.append(f"t={t}")
        super().__init__(" ".join(parts))


class NonFiniteLoss(GraphTrackError, FloatingPointError):
    def __init__(self, message, epoch=None, batch=None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"{message} (epoch={epoch}, batch={batch})")


class SingularInnovationCov(GraphTrackError, ArithmeticError):
    pass


class DegenerateInnovation(GraphTrackError, ArithmeticError):
    pass


class GraphNotRecorded(GraphTrackError, RuntimeError):
    pass


class LineageViolation(GraphTrackError, ValueError):
    pass


class FormatVersionMismatch(GraphTrackError, ValueError):
    pass


class ChecksumMismatch(GraphTrackError, ValueError):
    pass
