"""Exception hierarchy shared by every layer of the stack."""


class SemstackError(Exception):
    """Base class for all errors raised by semstack."""


class ValidationError(SemstackError, ValueError):
    """An argument or configuration value violates a documented precondition."""


class DistortionError(SemstackError):
    """A block still carries erased positions where a clean block is required."""

    def __init__(self, erased: int, message: str | None = None):
        self.erased = erased
        super().__init__(message or f"block has {erased} erased position(s)")


class FramingError(SemstackError):
    """Block length does not fit the codec framing."""


class UnreachableLinkError(SemstackError):
    """A link's delivery probability is zero (or underflows to zero)."""


class EnergyExhaustedError(SemstackError):
    """A node does not hold enough energy for the requested action."""

    def __init__(self, node, needed, available):
        self.node = node
        self.needed = needed
        self.available = available
        super().__init__(f"{node}: needs {needed} fJ, has {available} fJ")


class BufferOverflowError(SemstackError):
    """A node buffer cannot hold another TDU."""


class ProtocolError(SemstackError):
    """Peers disagree about framing (e.g. inconsistent fragment counts)."""


class NoRouteError(SemstackError):
    """No path offer survives the flow's constraints."""


class ContractViolation(SemstackError):
    """A caller broke an operation's precondition that is not a value error."""


class ScenarioError(ValidationError):
    """A scenario document is malformed or semantically invalid.

    ``key`` is the dotted path of the offending entry and ``line`` its
    1-based line in the source document when known.
    """

    def __init__(self, key: str, reason: str, line: int | None = None):
        self.key = key
        self.reason = reason
        self.line = line
        where = f"{key} (line {line})" if line is not None else key
        super().__init__(f"{where}: {reason}")


class InvariantViolation(SemstackError):
    """The engine detected an internal inconsistency and aborted the run."""
