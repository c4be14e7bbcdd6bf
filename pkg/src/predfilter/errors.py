"""Exception types raised by predfilter.

Every malformed input produces one of these; nothing returns a half-built value.
"""


class PredFilterError(Exception):
    """Base class for all predfilter errors."""


class FormatError(PredFilterError, ValueError):
    """A file does not follow its on-disk format."""


class BadMagic(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class NonFiniteValue(FormatError):
    pass


class UnsupportedMaxval(FormatError):
    pass


class ManifestError(PredFilterError, ValueError):
    pass


class DimensionMismatch(PredFilterError, ValueError):
    pass


class PredHasIgnore(PredFilterError, ValueError):
    pass


class EmptyReport(PredFilterError, ValueError):
    pass


class EmptyLoss(PredFilterError, ValueError):
    pass


class ConfigError(PredFilterError, ValueError):
    """Invalid configuration field; ``field`` names the offender."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class MissingInput(PredFilterError, ValueError):
    """A record lacks a file or field the requested operation needs."""
