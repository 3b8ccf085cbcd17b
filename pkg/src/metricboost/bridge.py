"""Client for external metrics spoken to over newline-delimited JSON.

The wire protocol is symmetric and tiny. Every message is one JSON object on
one UTF-8 line:

* handshake: client sends ``{"op": "hello", "version": 1}``; the server
  answers with the same shape (plus an optional ``"name"``).
* scoring: client sends ``{"op": "score", "id": N, "batch": [...]}`` where
  each batch element is ``{"gts": [[token, ...], ...], "hyp": [token, ...]}``;
  the server answers ``{"op": "score", "id": N, "scores": [...]}`` or
  ``{"op": "error", "id": N, "message": "..."}``. Request ids are strictly
  increasing within a connection.

Endpoints are addressed as ``cmd:<command line>`` (subprocess over
stdin/stdout) or ``tcp:<host>:<port>``.
"""

from __future__ import annotations

import json
import select
import shlex
import socket
import subprocess
import time
from typing import Sequence

from .metrics import MetricError, MetricHandle, MetricRequest

__all__ = ["BridgeError", "BridgeMetric", "external_metric", "PROTOCOL_VERSION"]

PROTOCOL_VERSION = 1


class BridgeError(MetricError):
    """Raised when an external metric endpoint misbehaves or reports an error."""


class _StdioChannel:
    """Line transport over a child process's stdin/stdout."""

    def __init__(self, command: str):
        argv = shlex.split(command)
        if not argv:
            raise BridgeError("empty endpoint command")
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                bufsize=0,
            )
        except OSError as exc:
            raise BridgeError(f"cannot launch endpoint {command!r}: {exc}") from exc
        self._buffer = b""

    def send_line(self, line: bytes) -> None:
        if self._proc.poll() is not None:
            raise BridgeError(f"endpoint exited with code {self._proc.returncode}")
        try:
            self._proc.stdin.write(line + b"\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise BridgeError(f"endpoint pipe closed: {exc}") from exc

    def recv_line(self, timeout: float) -> bytes:
        deadline = time.monotonic() + timeout
        stream = self._proc.stdout
        while b"\n" not in self._buffer:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BridgeError(f"timed out after {timeout:g}s waiting for endpoint response")
            ready, _, _ = select.select([stream], [], [], remaining)
            if not ready:
                continue
            # Raw (unbuffered) pipe: read() returns whatever is available.
            chunk = stream.read(65536)
            if not chunk:
                raise BridgeError("endpoint closed the connection")
            self._buffer += chunk
        line, self._buffer = self._buffer.split(b"\n", 1)
        return line

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()


class _TcpChannel:
    """Line transport over a TCP connection."""

    def __init__(self, host: str, port: int, timeout: float):
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise BridgeError(f"cannot connect to {host}:{port}: {exc}") from exc
        self._buffer = b""

    def send_line(self, line: bytes) -> None:
        try:
            self._sock.sendall(line + b"\n")
        except OSError as exc:
            raise BridgeError(f"endpoint connection lost: {exc}") from exc

    def recv_line(self, timeout: float) -> bytes:
        deadline = time.monotonic() + timeout
        while b"\n" not in self._buffer:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BridgeError(f"timed out after {timeout:g}s waiting for endpoint response")
            self._sock.settimeout(remaining)
            try:
                chunk = self._sock.recv(65536)
            except socket.timeout:
                continue
            except OSError as exc:
                raise BridgeError(f"endpoint connection lost: {exc}") from exc
            if not chunk:
                raise BridgeError("endpoint closed the connection")
            self._buffer += chunk
        line, self._buffer = self._buffer.split(b"\n", 1)
        return line

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def _open_channel(endpoint: str, timeout: float):
    if endpoint.startswith("cmd:"):
        return _StdioChannel(endpoint[len("cmd:") :])
    if endpoint.startswith("tcp:"):
        rest = endpoint[len("tcp:") :]
        host, sep, port_text = rest.rpartition(":")
        if not sep or not host:
            raise BridgeError(f"malformed tcp endpoint {endpoint!r}; expected tcp:<host>:<port>")
        try:
            port = int(port_text)
        except ValueError:
            raise BridgeError(f"malformed tcp endpoint {endpoint!r}; bad port {port_text!r}") from None
        return _TcpChannel(host, port, timeout)
    raise BridgeError(f"unknown endpoint scheme in {endpoint!r}; expected cmd:... or tcp:host:port")


class BridgeMetric(MetricHandle):
    """Metric handle backed by an external process or TCP endpoint.

    The connection carries one request at a time (``single_flight``), so a
    handle may be shared across threads safely; chunking to
    ``batch_capacity`` is handled by :func:`metricboost.metrics.score_batch`.
    """

    kind = "external"
    single_flight = True

    def __init__(self, endpoint: str, batch_capacity: int = 64, timeout: float = 30.0):
        super().__init__()
        if batch_capacity < 1:
            raise BridgeError(f"batch_capacity must be >= 1, got {batch_capacity}")
        self.endpoint = endpoint
        self.batch_capacity = batch_capacity
        self.timeout = float(timeout)
        self._next_id = 1
        self._channel = _open_channel(endpoint, self.timeout)
        hello = self._roundtrip({"op": "hello", "version": PROTOCOL_VERSION})
        if hello.get("op") != "hello":
            raise BridgeError(f"handshake failed: expected op 'hello', got {hello.get('op')!r}")
        if hello.get("version") != PROTOCOL_VERSION:
            raise BridgeError(
                f"protocol version mismatch: endpoint speaks {hello.get('version')!r}, "
                f"client speaks {PROTOCOL_VERSION}"
            )
        self.name = str(hello.get("name", endpoint))

    def _roundtrip(self, message: dict) -> dict:
        payload = json.dumps(message, ensure_ascii=False, separators=(",", ":"))
        self._channel.send_line(payload.encode("utf-8"))
        raw = self._channel.recv_line(self.timeout)
        try:
            response = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BridgeError(f"endpoint sent malformed JSON: {exc}") from exc
        if not isinstance(response, dict):
            raise BridgeError("endpoint sent a non-object message")
        return response

    def _score_chunk(self, requests: Sequence[MetricRequest]) -> list[float]:
        request_id = self._next_id
        self._next_id += 1
        message = {
            "op": "score",
            "id": request_id,
            "batch": [
                {"gts": [list(gt) for gt in r.ground_truths], "hyp": list(r.hypothesis)}
                for r in requests
            ],
        }
        response = self._roundtrip(message)
        op = response.get("op")
        if op == "error":
            raise BridgeError(f"endpoint error: {response.get('message', 'unspecified')}")
        if op != "score":
            raise BridgeError(f"endpoint sent unexpected op {op!r}")
        if response.get("id") != request_id:
            raise BridgeError(f"endpoint answered id {response.get('id')!r} to request {request_id}")
        scores = response.get("scores")
        if not isinstance(scores, list) or not all(
            isinstance(s, (int, float)) and not isinstance(s, bool) for s in scores
        ):
            raise BridgeError("endpoint sent a malformed 'scores' list")
        return [float(s) for s in scores]

    def close(self) -> None:
        self._channel.close()


def external_metric(endpoint: str, batch_capacity: int = 64, timeout: float = 30.0) -> BridgeMetric:
    """Connect to an external metric endpoint and perform the handshake."""
    return BridgeMetric(endpoint, batch_capacity=batch_capacity, timeout=timeout)
