class AccompanistError(Exception):
    """Base class for everything this package raises on purpose."""


class ScoreFormatError(AccompanistError, ValueError):
    pass


class MidiImportError(AccompanistError, ValueError):
    pass


class AlignmentError(AccompanistError, ValueError):
    pass


class ClockFaultError(AccompanistError, RuntimeError):
    """Input timestamps went backwards by more than the tolerated jitter."""


class SinkUnavailableError(AccompanistError, RuntimeError):
    pass


class ConfigError(AccompanistError, ValueError):
    pass
