"""Exception hierarchy shared across the package."""

from __future__ import annotations


class LesionKBError(Exception):
    """Base class for every error raised by lesionkb."""


class DataError(LesionKBError):
    """Malformed or inconsistent input data."""


class UnparsableSize(DataError, ValueError):
    pass


class InvalidChunking(DataError, ValueError):
    pass


class UnknownRule(DataError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else "unknown rule"


class FormatViolation(DataError):
    """A persisted file broke its format; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where = f"{where}{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")


class IoFailure(LesionKBError, OSError):
    pass


class DimensionMismatch(DataError, ValueError):
    pass


class ZeroVector(DataError, ValueError):
    pass


class MissingEmbedding(DataError):
    pass


class LengthMismatch(DataError, ValueError):
    pass


class MissingSlot(LesionKBError, KeyError):
    def __init__(self, slot: str):
        self.slot = slot
        super().__init__(slot)

    def __str__(self) -> str:
        return f"missing slot {self.slot!r}"


class ScoreNotFound(DataError, ValueError):
    pass


class StructureViolation(DataError, ValueError):
    def __init__(self, message: str, fragment: str = ""):
        self.message = message
        self.fragment = fragment
        super().__init__(message if not fragment else f"{message}: {fragment[:200]!r}")


class ProviderError(LesionKBError):
    """Anything that went wrong talking to an LLM or embedding backend."""


class TransportError(ProviderError):
    """A single failed call; retryable."""


class ProviderUnavailable(ProviderError):
    pass


class FixtureMiss(ProviderError):
    """The mock backend has no recorded answer for a request."""
