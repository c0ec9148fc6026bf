"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class RtsepError(Exception):
    exit_code = 1


class UsageError(RtsepError):
    exit_code = 2


class InputError(RtsepError, ValueError):
    """Bad audio or array input (wrong rate, non-finite samples, silence)."""

    exit_code = 3


class SizeError(InputError):
    """Array length or shape does not match what the operation expects."""


class FormatError(InputError):
    """Weight bundle or manifest file is truncated or malformed."""


class GeometryError(InputError):
    pass


class DomainError(InputError):
    """Metric undefined for the given signals (e.g. all-zero target)."""


class FixtureError(InputError):
    pass


class ConfigError(RtsepError, ValueError):
    exit_code = 4


class IncompatibleWeightsError(ConfigError):
    pass
