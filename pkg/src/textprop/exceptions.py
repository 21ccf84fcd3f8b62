"""Exception hierarchy shared across the package."""


class TextPropError(Exception):
    """Base class for all errors raised by textprop."""


class InvalidArgumentError(TextPropError, ValueError):
    pass


class DegenerateGeometryError(TextPropError, ValueError):
    pass


class InsufficientBackgroundError(TextPropError, ValueError):
    pass


class NoCandidateError(TextPropError, ValueError):
    """No frame passed the OCR confidence floor.

    ``best_confidence`` holds the highest confidence among the rejected frames.
    """

    def __init__(self, message, best_confidence=None):
        super().__init__(message)
        self.best_confidence = best_confidence


class UndefinedCorrelationError(TextPropError, ValueError):
    pass


class LayoutError(TextPropError, ValueError):
    pass


class AnnotationParseError(TextPropError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FrameProcessingError(TextPropError, RuntimeError):
    """Wraps a failure while processing a specific frame."""

    def __init__(self, frame_index, cause):
        super().__init__(f"frame {frame_index}: {cause}")
        self.frame_index = frame_index
        self.cause = cause
