"""Exception types shared across the toolkit.

The CLI maps these onto process exit codes: DataError -> 3,
FormatError -> 4.  Anything else is a bug and escapes as a traceback.
"""


class CodecError(Exception):
    """Base class for all errors raised deliberately by this package."""


class DataError(CodecError):
    """Input data unusable: wrong sample rate, empty corpus, too few
    samples for the requested codebook size, misaligned targets."""


class FormatError(CodecError):
    """Malformed serialized artifact: bad magic, version, checksum,
    truncation, nonzero padding, out-of-range field."""


class StreamStateError(CodecError):
    """Streaming decoder used out of order (push after flush, double flush)."""


class MissingSectionError(DataError):
    """Model container lacks a section required by the requested operation
    (e.g. decoding with an encode-only model)."""
