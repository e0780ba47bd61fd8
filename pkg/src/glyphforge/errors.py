"""Exception types shared across the package."""

from __future__ import annotations


class GlyphForgeError(Exception):
    pass


class DomainError(GlyphForgeError, ValueError):
    """Input is well-typed but outside the supported domain (e.g. unknown glyph id)."""


class ContractError(GlyphForgeError, RuntimeError):
    """A caller broke a structural precondition (missing token type, unfrozen module...)."""


class ConfigurationError(GlyphForgeError, ValueError):
    pass


class PreconditionError(GlyphForgeError, RuntimeError):
    pass


class DatasetLoadError(GlyphForgeError, IOError):
    pass


class ProtocolError(GlyphForgeError, ValueError):
    """A planner / client returned something that violates the wire protocol.

    ``raw`` keeps the offending response for debugging.
    """

    def __init__(self, message: str, raw: str | None = None):
        super().__init__(message)
        self.raw = raw


class LayoutParseError(ProtocolError):
    pass


class TransportError(GlyphForgeError, ConnectionError):
    def __init__(self, message: str, attempts: int = 1, retryable: bool = True):
        super().__init__(message)
        self.attempts = attempts
        self.retryable = retryable


class PipelineError(GlyphForgeError, RuntimeError):
    """Raised by inference pipelines; ``stage`` names the failing step."""

    def __init__(self, message: str, stage: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
