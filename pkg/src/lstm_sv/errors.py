"""Exception types raised across the toolkit.

Every error carries the name used in logs and CLI reports, so a failed
per-file step can be summarised as ``path: AllSilent`` and so on.
"""


class SVError(Exception):
    """Base class for all toolkit errors."""

    @property
    def kind(self) -> str:
        return type(self).__name__


# audio_io
class MalformedHeader(SVError):
    pass


class UnsupportedEncoding(SVError):
    pass


class EmptyAudio(SVError):
    pass


class AllSilent(SVError):
    pass


class SampleRateMismatch(SVError):
    pass


class ParseError(SVError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicatePath(SVError):
    pass


class SpeakerWithSingleDevUtterance(SVError):
    pass


# features
class ConfigError(SVError):
    pass


class SignalTooShort(SVError):
    pass


class TooFewFrames(SVError):
    pass


class UtteranceTooShort(SVError):
    pass


class CacheError(SVError):
    pass


# network
class ShapeMismatch(SVError):
    pass


class NonFiniteActivation(SVError):
    pass


class IndexOutOfRange(SVError):
    pass


class EmptyBatch(SVError):
    pass


class StaleCache(SVError):
    pass


class CheckpointError(SVError):
    pass


class DigestMismatch(SVError):
    pass


# training
class BatchTooSmall(SVError):
    pass


class NoGenuinePairs(SVError):
    pass


class NoPairsSurvive(SVError):
    pass


# eval
class NoEnrollmentData(SVError):
    pass


class EmptyScoreList(SVError):
    pass


class MissingEnrollment(SVError):
    pass


# gmm
class DegenerateCluster(SVError):
    pass


class NoAdaptationData(SVError):
    pass


class EmptyTest(SVError):
    pass
