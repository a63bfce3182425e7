"""Exception hierarchy shared by every ctxmim module."""


class CtxMIMError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CtxMIMError, ValueError):
    """Array shapes or grid geometry do not line up."""


class RangeError(CtxMIMError, ValueError):
    """A scalar or array value lies outside its allowed range."""


class ConfigError(CtxMIMError, ValueError):
    """A configuration object violates one of its invariants."""


class EmptySupportError(CtxMIMError, ValueError):
    """A masked reduction was requested over an empty mask."""


class DataError(CtxMIMError):
    """A dataset is empty, unreadable, or unsuitable for the request."""


class CorruptCheckpointError(CtxMIMError):
    """A checkpoint file is truncated, tampered with, or of the wrong version."""
