"""Exception hierarchy shared across the package."""


class CFPredictError(Exception):
    """Base class for every error raised by cfpredict."""


# numeric core / models
class ShapeMismatch(CFPredictError, ValueError):
    pass


class InvalidRate(CFPredictError, ValueError):
    pass


class InvalidConfig(CFPredictError, ValueError):
    pass


class StaleTape(CFPredictError, RuntimeError):
    """A tape was reused, produced by another model, or recorded in eval mode."""


# serialization
class IoFailure(CFPredictError, OSError):
    pass


class FormatVersionMismatch(CFPredictError, ValueError):
    """Bad magic, unknown version, or a file that is truncated/overlong."""


class PayloadLengthMismatch(CFPredictError, ValueError):
    pass


# dataset / training
class NonChronologicalInput(CFPredictError, ValueError):
    pass


class EmptyTrainingSet(CFPredictError, ValueError):
    pass


class EmptyDataset(CFPredictError, ValueError):
    pass


class ConfigMismatch(CFPredictError, ValueError):
    pass


# metrics
class LengthMismatch(CFPredictError, ValueError):
    pass


class EmptyInput(CFPredictError, ValueError):
    pass


class DegenerateVariance(CFPredictError, ValueError):
    pass


class ZeroBase(CFPredictError, ValueError):
    pass


# ingestion
class CodeforcesError(CFPredictError):
    pass


class ApiFailure(CodeforcesError):
    """The API answered with status FAILED."""

    def __init__(self, comment: str):
        super().__init__(comment)
        self.comment = comment


class UnknownHandle(ApiFailure):
    pass


class NotAParticipant(CodeforcesError):
    pass


class TransportError(CodeforcesError):
    pass


class CacheMiss(TransportError):
    """Offline mode was requested and the response is not cached."""


class MalformedResponse(CodeforcesError):
    pass
