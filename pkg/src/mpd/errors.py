"""Exception hierarchy shared by every mpd module."""


class MPDError(Exception):
    """Base class for all errors raised by mpd."""


class InfeasibleParams(MPDError, ValueError):
    """A dialect's parameters do not fit the message it is applied to."""


class WrongPartCount(MPDError, ValueError):
    """The number of wire units does not match the dialect's arity."""


class DialectMismatch(MPDError, ValueError):
    """Received sub-packet lengths disagree with the expected split dialect."""


class EmptyKey(MPDError, ValueError):
    pass


class InvalidDepth(MPDError, ValueError):
    pass


class LastDialect(MPDError, ValueError):
    """Refusing to remove the only entry of a dialect table."""


class ParseError(MPDError, ValueError):
    """Bytes are not a valid message of the active protocol grammar."""


class UnknownProtocol(MPDError, LookupError):
    pass


class ConfigError(MPDError, ValueError):
    pass


class FrameError(MPDError):
    """Malformed or oversized length-prefixed frame."""


class ChannelError(MPDError, ConnectionError):
    """The transport failed or the peer spoke an incompatible protocol."""
