"""Exception hierarchy shared by all kvreplay modules."""

from __future__ import annotations


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class ConfigError(ValueError):
    """A replay/policy configuration is invalid (CLI exit code 2)."""


class TraceFormatError(Exception):
    """Base class for trace-file parse failures (CLI exit code 3)."""


class BadMagicError(TraceFormatError):
    """The file does not start with the expected magic tag."""


class VersionMismatchError(TraceFormatError):
    """The file's format version is not supported by this reader."""


class TruncatedTraceError(TraceFormatError):
    """The file ends before the payload announced by its header."""
