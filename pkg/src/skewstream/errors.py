"""Exception taxonomy shared across the package."""


class SkewstreamError(Exception):
    """Base class for all package errors."""


class ParameterError(SkewstreamError, ValueError):
    """A value is outside its documented range or otherwise malformed."""


class CapacityError(SkewstreamError):
    """An operation would exceed a configured buffer or canvas limit."""


class ProtocolError(SkewstreamError):
    """An operation was called out of sequence (e.g. finalize before a full sweep)."""


class MetadataError(SkewstreamError):
    """Stack metadata is missing, unreadable or inconsistent with the data."""


class EndOfStream(SkewstreamError):
    """A finite frame source has no more frames."""
