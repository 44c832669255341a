"""Cloud node: an HTTP classification endpoint over pluggable backends.

Wire protocol (HTTP/1.1, loopback-friendly, keep-alive):

* ``POST /v1/classify`` with an ``application/octet-stream`` FMAP body ->
  ``200 {"label": str, "class_index": int, "server_ms": float}``.
  Malformed bodies or unregistered payloads -> ``400 {"error": code}``;
  backend failures -> ``503 {"error": "backend_failure"}``.
* ``GET /v1/health`` -> ``200 {"status": "ok"}``.

Requests are identified by the SHA-256 digest of the body, so backends are
payload-addressed rather than name-addressed.  The edge uploads the raw
input payload (not the intermediate layer output, which is usually larger);
a real deployment would recompute features server-side, which the stub
backends here stand in for.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Protocol

from .errors import BackendError, FormatError, UnknownSampleError
from .io import Manifest, feature_from_bytes

__all__ = [
    "ClassificationResult",
    "Backend",
    "LookupBackend",
    "ExternalBackend",
    "ServerConfig",
    "CloudServer",
    "serve",
    "payload_digest",
]

logger = logging.getLogger("earlin.server")


def payload_digest(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True)
class ClassificationResult:
    label: str
    class_index: int
    server_ms: float


class Backend(Protocol):
    """Classifier stub; must be safe for concurrent invocation."""

    def classify(self, digest: str, payload: bytes) -> ClassificationResult: ...


class LookupBackend:
    """Deterministic digest -> label table, typically built from a manifest."""

    def __init__(self, table: dict[str, str]):
        self._table = dict(table)
        self._labels = {label: i for i, label in enumerate(sorted(set(self._table.values())))}

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> "LookupBackend":
        """Digest the bytes the edge would upload (image file when listed,
        otherwise the feature file) for every labeled entry."""
        table: dict[str, str] = {}
        for entry in manifest.entries:
            if entry.true_label is None:
                continue
            source = entry.image_path if entry.image_path is not None else entry.feature_path
            table[payload_digest(manifest.resolve(source).read_bytes())] = entry.true_label
        return cls(table)

    def classify(self, digest: str, payload: bytes) -> ClassificationResult:
        started = time.perf_counter()
        label = self._table.get(digest)
        if label is None:
            raise UnknownSampleError(f"no label registered for digest {digest[:12]}")
        return ClassificationResult(
            label=label,
            class_index=self._labels[label],
            server_ms=(time.perf_counter() - started) * 1000.0,
        )


class ExternalBackend:
    """Run an external command per request: FMAP on stdin, one label line out.

    Invocations are serialized with a lock, which keeps the thread-safety
    contract without assuming the command tolerates concurrent runs.
    """

    def __init__(self, command: str | list[str], timeout_s: float = 10.0,
                 labels: list[str] | None = None):
        self._argv = shlex.split(command) if isinstance(command, str) else list(command)
        self._timeout_s = timeout_s
        self._lock = threading.Lock()
        self._labels: dict[str, int] = (
            {label: i for i, label in enumerate(labels)} if labels is not None else {}
        )
        self._dynamic_labels = labels is None

    def classify(self, digest: str, payload: bytes) -> ClassificationResult:
        started = time.perf_counter()
        try:
            with self._lock:
                proc = subprocess.run(
                    self._argv,
                    input=payload,
                    stdout=subprocess.PIPE,
                    stderr=subprocess.DEVNULL,
                    timeout=self._timeout_s,
                )
        except subprocess.TimeoutExpired as exc:
            raise BackendError(f"backend command timed out after {self._timeout_s}s") from exc
        except OSError as exc:
            raise BackendError(f"backend command failed to start: {exc}") from exc
        if proc.returncode != 0:
            raise BackendError(f"backend command exited with status {proc.returncode}")
        label = proc.stdout.decode("utf-8", errors="replace").strip().splitlines()
        if len(label) != 1 or not label[0]:
            raise BackendError("backend command must emit exactly one label line")
        with self._lock:
            if label[0] not in self._labels:
                if not self._dynamic_labels:
                    raise BackendError(f"backend emitted unknown label {label[0]!r}")
                self._labels[label[0]] = len(self._labels)
            index = self._labels[label[0]]
        return ClassificationResult(
            label=label[0],
            class_index=index,
            server_ms=(time.perf_counter() - started) * 1000.0,
        )


@dataclass
class ServerConfig:
    backend: Backend
    host: str = "127.0.0.1"
    port: int = 0
    log_requests: bool = True


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "CloudServer"

    def _reply(self, status: int, doc: dict) -> None:
        body = json.dumps(doc).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self) -> None:  # noqa: N802 (http.server API)
        if self.path == "/v1/health":
            self._reply(200, {"status": "ok"})
        else:
            self._reply(404, {"error": "unknown_endpoint"})

    def do_POST(self) -> None:  # noqa: N802
        if self.path != "/v1/classify":
            self._reply(404, {"error": "unknown_endpoint"})
            return
        self.server.count_request()
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            length = -1
        if length <= 0:
            self._reply(400, {"error": "malformed_tensor"})
            return
        payload = self.rfile.read(length)
        started = time.perf_counter()
        try:
            feature_from_bytes(payload)
        except FormatError:
            self._reply(400, {"error": "malformed_tensor"})
            return
        digest = payload_digest(payload)
        try:
            result = self.server.config.backend.classify(digest, payload)
        except UnknownSampleError:
            self._reply(400, {"error": UnknownSampleError.code})
            return
        except BackendError:
            self._reply(503, {"error": BackendError.code})
            return
        server_ms = (time.perf_counter() - started) * 1000.0
        if self.server.config.log_requests:
            logger.info("classify %s -> %s (%.3f ms)", digest[:12], result.label, server_ms)
        self._reply(
            200,
            {"label": result.label, "class_index": result.class_index, "server_ms": server_ms},
        )

    def log_message(self, format: str, *args) -> None:
        # http.server writes every request to stderr by default; keep the
        # hot path quiet and let the logging module decide.
        logger.debug(format, *args)


class CloudServer(ThreadingHTTPServer):
    """Classification server with a thread-safe request counter."""

    daemon_threads = True

    def __init__(self, config: ServerConfig):
        self.config = config
        self._count_lock = threading.Lock()
        self._request_count = 0
        self._thread: threading.Thread | None = None
        super().__init__((config.host, config.port), _Handler)

    def count_request(self) -> None:
        with self._count_lock:
            self._request_count += 1

    @property
    def request_count(self) -> int:
        with self._count_lock:
            return self._request_count

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start_background(self) -> None:
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self.shutdown()
        if self._thread is not None:
            self._thread.join()
            self._thread = None
        self.server_close()


def serve(config: ServerConfig) -> CloudServer:
    """Bind and start a cloud node in a background thread; caller stops it."""
    server = CloudServer(config)
    server.start_background()
    logger.info("serving on %s", server.url)
    return server
