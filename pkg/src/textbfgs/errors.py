"""Exception types shared across the engine.

Errors are grouped by the subsystem that raises them; everything inherits
from TextBfgsError so callers can catch the whole family at once.
"""

from __future__ import annotations


class TextBfgsError(Exception):
    """Base class for all engine errors."""


# --- scoring ---------------------------------------------------------------

class EmptySuite(TextBfgsError):
    """A pass rate was requested over a suite with zero tests."""


class SuiteMismatch(TextBfgsError):
    """Two execution reports cover different test sets and cannot be compared."""


# --- case base -------------------------------------------------------------

class ZeroVector(TextBfgsError):
    """Cosine similarity is undefined for a zero-norm vector."""


class DimensionMismatch(TextBfgsError):
    """A vector does not match the store's fixed dimension."""


class DuplicateId(TextBfgsError):
    """A case with this id already exists in the store."""


class SchemaViolation(TextBfgsError):
    """A record (case, task, fixture) is missing a field or has a bad value."""


class IoFailure(TextBfgsError):
    """A file could not be read or written."""


# --- llm gateway -----------------------------------------------------------

class BackendUnreachable(TextBfgsError):
    """The chat/embedding backend could not be reached after retries."""


class FixtureMiss(TextBfgsError):
    """The replay backend has no recorded response for this request hash."""


class TruncationSuspected(TextBfgsError):
    """The response hit max_tokens without closing a required tag."""


class EmptyText(TextBfgsError):
    """Embedding was requested for empty text."""


# --- prompting -------------------------------------------------------------

class MalformedResponse(TextBfgsError):
    """A tag-structured response is missing one or more required tags.

    The optimizer treats this as a retryable step failure.
    """

    def __init__(self, missing_tags: list[str]):
        self.missing_tags = list(missing_tags)
        super().__init__(f"missing or unclosed tags: {', '.join(self.missing_tags)}")


# --- sandbox ---------------------------------------------------------------

class SandboxSpawnFailure(TextBfgsError):
    """The runner process could not be started (host misconfiguration)."""


class ProtocolViolation(TextBfgsError):
    """The runner emitted output that does not decode as protocol lines."""
