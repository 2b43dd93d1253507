"""Exception types shared across the package."""


class TcapError(Exception):
    """Base class for errors raised by this package."""


class FormatError(TcapError):
    """A file (manifest, feature store, checkpoint) is malformed."""


class NumericError(TcapError):
    """A numeric-domain violation: non-finite values where finite ones are required."""
