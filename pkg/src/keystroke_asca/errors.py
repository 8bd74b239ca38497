"""Exception hierarchy shared by every stage of the pipeline."""


class KeystrokeError(Exception):
    """Base class for domain errors (mapped to exit code 1 by the CLI)."""


class ParseError(KeystrokeError):
    pass


class UnsupportedFormat(KeystrokeError):
    pass


class EmptyAudio(KeystrokeError):
    pass


class IoError(KeystrokeError):
    pass


class ChannelError(KeystrokeError):
    pass


class SampleRateError(KeystrokeError):
    pass


class TooShort(KeystrokeError):
    pass


class ConvergenceError(KeystrokeError):
    """Raised when the adaptive threshold search runs out of iterations.

    ``best`` holds the segment list whose count came closest to the target,
    ``trace`` the per-iteration (prominence, step, count) records.
    """

    def __init__(self, message, best=None, trace=None):
        super().__init__(message)
        self.best = best if best is not None else []
        self.trace = trace if trace is not None else []


class ResolutionError(KeystrokeError):
    pass


class ShapeError(KeystrokeError):
    pass


class LabelError(KeystrokeError):
    pass


class ConfigError(KeystrokeError):
    pass


class StaleTapeError(KeystrokeError):
    pass


class StratifyError(KeystrokeError):
    pass


class DataError(KeystrokeError):
    pass
