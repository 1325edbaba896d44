"""Exception hierarchy shared by all stages."""


class StepcrackError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(StepcrackError, ValueError):
    pass


class InvertedElementError(StepcrackError):
    """Local motion with ``det F <= 0`` (physically inadmissible)."""


class ConditioningError(StepcrackError):
    pass


class FitError(StepcrackError):
    """A fit could not produce a physical result."""


class FormatError(StepcrackError, ValueError):
    """Structural violation in a file read by :mod:`stepcrack.io`."""


class ConfigError(StepcrackError, ValueError):
    pass
