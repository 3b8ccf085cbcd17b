"""Line-delimited JSON scoring server.

The protocol (version 1) carries one JSON object per UTF-8 line:

* handshake: the client opens with ``{"op": "hello", "version": 1}``; the
  server answers ``{"op": "hello", "version": 1, "name": "<scorer>"}``.
* scoring: ``{"op": "score", "id": N, "batch": [...]}`` where every batch
  element is ``{"gts": [[token, ...], ...], "hyp": [token, ...]}``. The
  server answers ``{"op": "score", "id": N, "scores": [...]}`` with one float
  per element, or ``{"op": "error", "id": N, "message": "..."}``.

Every request gets exactly one response, in request order, and the
connection survives all error responses — only EOF (or a dead socket) ends a
session. Requests are handled one at a time; clients that want parallelism
chunk their batches instead.

Scorers are plain callables ``scorer(gts, hyp) -> float``. The bundled
``mock`` scorer hashes the joined text into a deterministic pseudo-score, so
integration tests can exercise the full wire without any model dependency;
real scorers plug in by dotted name (``--scorer mymodule:score``).
"""

from __future__ import annotations

import hashlib
import importlib
import json
import math
import socket
import sys
from dataclasses import dataclass
from typing import IO, Callable, Sequence

__all__ = [
    "PROTOCOL_VERSION",
    "DEFAULT_BATCH_SIZE",
    "AdapterConfig",
    "ScorerError",
    "SCORERS",
    "mock_score",
    "load_scorer",
    "handle_message",
    "serve",
]

PROTOCOL_VERSION = 1
DEFAULT_BATCH_SIZE = 1024
LISTEN_MODES = ("stdio", "tcp")

Scorer = Callable[[Sequence[Sequence[str]], Sequence[str]], float]


class ScorerError(Exception):
    """Raised when a scorer cannot be loaded or refuses an input."""


def mock_score(gts: Sequence[Sequence[str]], hyp: Sequence[str]) -> float:
    """Deterministic pseudo-score in [0, 1).

    The ground-truth segments and the hypothesis are joined with the record
    separator (U+001E, which cannot appear inside whitespace-split tokens)
    and pushed through SHA-256; the first 8 digest bytes, read big-endian,
    are scaled by 2**-64. Stable across runs, processes, and machines.
    """
    payload = "\x1e".join(" ".join(seg) for seg in (*gts, hyp))
    digest = hashlib.sha256(payload.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


SCORERS: dict[str, Scorer] = {"mock": mock_score}


def load_scorer(name: str) -> Scorer:
    """Resolve a scorer by registry name or ``module:callable`` path."""
    if name in SCORERS:
        return SCORERS[name]
    if ":" in name:
        module_name, _, attr = name.partition(":")
        try:
            module = importlib.import_module(module_name)
        except ImportError as exc:
            raise ScorerError(f"cannot import scorer module {module_name!r}: {exc}") from exc
        scorer = getattr(module, attr, None)
        if not callable(scorer):
            raise ScorerError(f"{name!r} does not name a callable")
        return scorer
    raise ScorerError(
        f"unknown scorer {name!r}; pick one of {sorted(SCORERS)} or pass module:callable"
    )


@dataclass(frozen=True)
class AdapterConfig:
    """Server settings: which scorer, how much per request, where to listen.

    ``fail_on`` makes the scorer raise whenever the given token appears in
    the input — a hook for exercising client-side error handling.
    """

    scorer: str = "mock"
    batch_size: int = DEFAULT_BATCH_SIZE
    listen: str = "stdio"
    host: str = "127.0.0.1"
    port: int = 0
    fail_on: str | None = None

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.listen not in LISTEN_MODES:
            raise ValueError(f"listen must be one of {LISTEN_MODES}, got {self.listen!r}")


def _error(request_id, message: str) -> dict:
    return {"op": "error", "id": request_id, "message": message}


def _parse_batch(batch, batch_size: int) -> list[tuple[list[list[str]], list[str]]]:
    if not isinstance(batch, list):
        raise ValueError("'batch' must be a list")
    if len(batch) > batch_size:
        raise ValueError(f"batch of {len(batch)} exceeds the configured limit {batch_size}")
    items = []
    for position, entry in enumerate(batch):
        if not isinstance(entry, dict):
            raise ValueError(f"batch[{position}] must be an object")
        gts = entry.get("gts")
        hyp = entry.get("hyp")
        if not isinstance(gts, list) or not all(
            isinstance(gt, list) and all(isinstance(tok, str) for tok in gt) for gt in gts
        ):
            raise ValueError(f"batch[{position}].gts must be a list of token lists")
        if not isinstance(hyp, list) or not all(isinstance(tok, str) for tok in hyp):
            raise ValueError(f"batch[{position}].hyp must be a token list")
        items.append((gts, hyp))
    return items


def handle_message(message, scorer: Scorer, scorer_name: str, batch_size: int) -> dict:
    """Map one decoded client message to exactly one response object."""
    if not isinstance(message, dict):
        return _error(None, "message must be a JSON object")
    op = message.get("op")
    if op == "hello":
        return {"op": "hello", "version": PROTOCOL_VERSION, "name": scorer_name}
    if op == "score":
        request_id = message.get("id")
        try:
            items = _parse_batch(message.get("batch"), batch_size)
        except ValueError as exc:
            return _error(request_id, str(exc))
        scores = []
        try:
            for gts, hyp in items:
                scores.append(float(scorer(gts, hyp)))
        except Exception as exc:
            return _error(request_id, f"scorer failed: {exc}")
        if not all(math.isfinite(s) for s in scores):
            # NaN/inf are not valid strict JSON; report instead of emitting.
            return _error(request_id, "scorer returned a non-finite value")
        return {"op": "score", "id": request_id, "scores": scores}
    return _error(message.get("id"), f"unknown op {op!r}")


def _wrap_fail_on(scorer: Scorer, token: str | None) -> Scorer:
    if token is None:
        return scorer

    def guarded(gts, hyp):
        if token in hyp or any(token in gt for gt in gts):
            raise ScorerError(f"refusing to score an input containing {token!r}")
        return scorer(gts, hyp)

    return guarded


def _serve_stream(
    reader: IO[bytes], writer: IO[bytes], scorer: Scorer, scorer_name: str, batch_size: int
) -> None:
    for raw in reader:
        line = raw.strip()
        if not line:
            continue
        try:
            message = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            response = _error(None, f"malformed JSON: {exc}")
        else:
            response = handle_message(message, scorer, scorer_name, batch_size)
        payload = json.dumps(response, ensure_ascii=False, separators=(",", ":"))
        writer.write(payload.encode("utf-8") + b"\n")
        writer.flush()


def serve(config: AdapterConfig = AdapterConfig()) -> None:
    """Serve the protocol until the peer disconnects.

    stdio mode reads stdin and writes stdout, exiting on EOF. TCP mode binds
    the configured address (port 0 picks a free port, announced on stderr as
    ``listening on HOST:PORT``) and serves one connection at a time until the
    process is stopped.
    """
    scorer = _wrap_fail_on(load_scorer(config.scorer), config.fail_on)
    if config.listen == "stdio":
        _serve_stream(
            sys.stdin.buffer, sys.stdout.buffer, scorer, config.scorer, config.batch_size
        )
        return
    with socket.create_server((config.host, config.port)) as server_sock:
        host, port = server_sock.getsockname()[:2]
        print(f"listening on {host}:{port}", file=sys.stderr, flush=True)
        while True:
            conn, _ = server_sock.accept()
            with conn:
                reader = conn.makefile("rb")
                writer = conn.makefile("wb")
                try:
                    _serve_stream(reader, writer, scorer, config.scorer, config.batch_size)
                except (BrokenPipeError, ConnectionResetError):
                    pass
