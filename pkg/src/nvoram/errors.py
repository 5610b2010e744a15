"""Exception types used across the simulator."""


class OramError(Exception):
    """Base class for all simulator errors."""


class ConfigError(OramError):
    """Invalid experiment configuration."""


class InvalidAddressError(OramError):
    """Logical address is the dummy sentinel or out of range."""


class StashOverflowError(OramError):
    """Stash exceeded its capacity; the run is aborted."""


class TempPosMapOverflowError(OramError):
    """Pending-remap table exceeded its capacity (protocol bug)."""


class WpqOverflowError(OramError):
    """Write pending queue exceeded its capacity (protocol bug)."""


class ProtocolError(OramError):
    """The controller reached a state the protocol forbids."""


class ConsistencyError(OramError):
    """A persistent position-map entry points at a path holding no matching copy."""


class CorruptImageError(OramError):
    """A memory image dump is missing regions or has bad lengths."""


class TraceParseError(OramError):
    """Trace text failed to parse; carries line/column context."""

    def __init__(self, message: str, line: int, column: int = 0):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.column = column
