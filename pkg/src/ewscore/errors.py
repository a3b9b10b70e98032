"""Exception types shared across the pipeline."""


class EwScoreError(Exception):
    """Base class for all pipeline errors."""


class NoRatings(EwScoreError):
    pass


class ParseError(EwScoreError):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class CorpusLayoutError(EwScoreError):
    pass


class NoVideo(EwScoreError):
    pass


class NoAudio(EwScoreError):
    pass


class BackendFailure(EwScoreError):
    def __init__(self, message, time=None):
        suffix = f" (t={time:.3f}s)" if time is not None else ""
        super().__init__(f"{message}{suffix}")
        self.time = time


class DimensionMismatch(EwScoreError):
    pass


class InsufficientData(EwScoreError):
    pass


class DegenerateLabels(EwScoreError):
    pass


class OutOfRange(EwScoreError):
    pass


class ZeroDuration(EwScoreError):
    pass


class MissingTrainPerformance(EwScoreError):
    pass


class PromptTooLong(EwScoreError):
    pass


class ServiceUnavailable(EwScoreError):
    pass


class AuthError(EwScoreError):
    pass


class TransportError(EwScoreError):
    """Retryable failure talking to a chat-completion service."""


class TooFewLessons(EwScoreError):
    pass


class ConstantInput(EwScoreError):
    def __init__(self, message="correlation undefined for constant input", fold=None):
        if fold is not None:
            message = f"fold {fold}: {message}"
        super().__init__(message)
        self.fold = fold


class NoDoubleRatedSegments(EwScoreError):
    pass


class EmptyBackground(EwScoreError):
    pass
