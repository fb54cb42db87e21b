"""Exception hierarchy shared by every module of the simulator."""

from __future__ import annotations


class FedSSAError(Exception):
    """Base class for all simulator errors."""


class DimensionError(FedSSAError, ValueError):
    """Array shapes do not line up."""


class ConfigError(FedSSAError, ValueError):
    """Invalid experiment configuration.

    ``key`` names the offending config entry when one is known.
    """

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class ProtocolError(FedSSAError, RuntimeError):
    """A message or state violates the round protocol."""


class IdxFormatError(FedSSAError, ValueError):
    """Base class for IDX parse failures."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class LengthMismatchError(IdxFormatError):
    pass
