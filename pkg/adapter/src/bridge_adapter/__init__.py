"""Scoring server speaking newline-delimited JSON over stdio or TCP."""

from .server import (
    DEFAULT_BATCH_SIZE,
    PROTOCOL_VERSION,
    SCORERS,
    AdapterConfig,
    ScorerError,
    handle_message,
    load_scorer,
    mock_score,
    serve,
)

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "DEFAULT_BATCH_SIZE",
    "PROTOCOL_VERSION",
    "SCORERS",
    "ScorerError",
    "handle_message",
    "load_scorer",
    "mock_score",
    "serve",
    "__version__",
]
