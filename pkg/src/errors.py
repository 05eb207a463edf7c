"""Exception hierarchy for the search engine.

Every error derives from ``SearchEngineError`` and from the closest built-in
exception, so callers may catch either.
"""

from typing import Iterable, Optional


class SearchEngineError(Exception):
    """Base class for all domain errors."""


class ConfigurationError(SearchEngineError, ValueError):
    """Invalid configuration value (image size, space file, flags)."""


class UnknownSpaceError(SearchEngineError, LookupError):
    """Requested search-space preset does not exist."""


class SchemaViolationError(SearchEngineError, ValueError):
    """Genome does not match the token schema of its space."""

    def __init__(self, message: str, token_index: Optional[int] = None):
        super().__init__(message)
        self.token_index = token_index


class UnsupportedScaleError(SearchEngineError, ValueError):
    """Resolution ratio is not a power of two."""


class GraphConsistencyError(SearchEngineError, RuntimeError):
    """Internal shape mismatch while expanding a cell."""


class UnsupportedOpError(SearchEngineError, ValueError):
    """Operator kind has no cost model."""


class LatencyLookupError(SearchEngineError, LookupError):
    """Signatures missing from the latency table."""

    def __init__(self, signatures: Iterable[object]):
        self.signatures = tuple(signatures)
        listed = "\n  ".join(str(s) for s in self.signatures)
        super().__init__(
            f"latency table has no entry for {len(self.signatures)} signature(s):\n  {listed}"
        )


class RewardDomainError(SearchEngineError, ValueError):
    """Reward requested for a non-positive latency."""


class BatchRejectedError(SearchEngineError, ValueError):
    """Controller batch is empty or carries non-finite rewards."""


class ResumeMismatchError(SearchEngineError, RuntimeError):
    """Replayed controller diverged from the recorded history."""


class ExchangeError(SearchEngineError, RuntimeError):
    """File-exchange protocol failure."""
