"""Exception hierarchy shared by every module."""


class AvlError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AvlError, ValueError):
    pass


class SlotIndexError(AvlError, IndexError):
    pass


class ConfigError(AvlError, ValueError):
    pass


class PromptError(AvlError, ValueError):
    pass


class PolicyError(AvlError, ValueError):
    pass


class StateError(AvlError, RuntimeError):
    pass


class TraceError(AvlError, ValueError):
    """Malformed trace rows or slots missing from a segment map."""
