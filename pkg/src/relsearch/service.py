"""Real-time scoring service.

A small stdlib HTTP server over the offline scoring stack: artifacts load
once at startup into immutable state, and every request runs the exact
feature-assembly + forward-pass code the offline evaluator uses, so online
and offline scores agree to float precision. The only mutable state is the
stats accumulator, guarded by a lock.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .corpus import (
    PinDocument,
    QueryRecord,
    load_embedding_store,
    load_pins,
)
from .features import FeatureExtractor, load_bm25_index
from .student import FeatureBatch, StudentModel, expected_gain, load_student, student_forward

logger = logging.getLogger(__name__)


class StartupError(RuntimeError):
    """An artifact failed to load or validate; the service must not start."""


class RequestError(ValueError):
    """Malformed request; maps to HTTP 400."""


@dataclass(frozen=True)
class ServiceConfig:
    student_checkpoint: str
    bm25_index: str
    pin_store: str
    query_embedding_store: str | None = None
    host: str = "127.0.0.1"
    port: int = 0  # 0 picks a free port
    max_batch: int = 512

    def __post_init__(self) -> None:
        if self.max_batch < 1:
            raise StartupError(f"max_batch must be >= 1, got {self.max_batch}")


@dataclass(frozen=True)
class PinScore:
    pin_id: str
    probs: tuple[float, ...]
    relevance_score: float


@dataclass(frozen=True)
class ScoreResponse:
    results: tuple[PinScore, ...]
    skipped: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "results": [
                {
                    "pin_id": r.pin_id,
                    "probs": list(r.probs),
                    "relevance_score": r.relevance_score,
                }
                for r in self.results
            ],
            "skipped": list(self.skipped),
        }


class ScoringEngine:
    """Loaded artifacts plus the batch scoring path shared with offline eval."""

    def __init__(
        self,
        model: StudentModel,
        extractor: FeatureExtractor,
        pins_by_id: dict[str, PinDocument],
        max_batch: int = 512,
    ) -> None:
        self.model = model
        self.extractor = extractor
        self.pins_by_id = pins_by_id
        self.max_batch = max_batch

    def score_online(
        self, query_text: str, pin_ids: list[str], query_id: str | None = None
    ) -> ScoreResponse:
        """Score known pins against a query; unknown ids land in the skip list.

        Result order matches the order of the known pins in the request.
        """
        if not isinstance(query_text, str) or not query_text.strip():
            raise RequestError("query_text must be a non-empty string")
        if not isinstance(pin_ids, list) or any(not isinstance(p, str) for p in pin_ids):
            raise RequestError("pin_ids must be a list of strings")
        if len(pin_ids) > self.max_batch:
            raise RequestError(f"batch of {len(pin_ids)} exceeds max_batch {self.max_batch}")

        query = QueryRecord(query_id=query_id or "", text=query_text)
        known: list[tuple[str, PinDocument]] = []
        skipped: list[str] = []
        for pin_id in pin_ids:
            pin = self.pins_by_id.get(pin_id)
            if pin is None:
                skipped.append(pin_id)
            else:
                known.append((pin_id, pin))

        if not known:
            return ScoreResponse(results=(), skipped=tuple(skipped))

        batch = FeatureBatch.from_pairs(
            ((self.extractor.assemble(query, pin), None) for _, pin in known),
            self.extractor.layout,
        )
        probs = student_forward(self.model, batch)
        gains = expected_gain(probs)
        results = tuple(
            PinScore(
                pin_id=pin_id,
                probs=tuple(float(p) for p in row),
                relevance_score=float(g),
            )
            for (pin_id, _), row, g in zip(known, probs, gains)
        )
        return ScoreResponse(results=results, skipped=tuple(skipped))


def build_engine(config: ServiceConfig) -> ScoringEngine:
    """Load and validate every artifact; any failure aborts startup."""

    def _load(what: str, path: str, loader):
        try:
            return loader(path)
        except FileNotFoundError as exc:
            raise StartupError(f"{what} not found: {path}") from exc
        except ValueError as exc:
            raise StartupError(f"{what} failed to load from {path}: {exc}") from exc

    model = _load("student checkpoint", config.student_checkpoint, load_student)
    index = _load("bm25 index", config.bm25_index, load_bm25_index)
    pins = _load("pin store", config.pin_store, load_pins)
    query_embeddings = {}
    if config.query_embedding_store:
        query_embeddings = _load(
            "query embedding store",
            config.query_embedding_store,
            lambda p: load_embedding_store(p, model.layout.d_query_emb),
        )
    extractor = FeatureExtractor(
        index, model.layout, query_embeddings=query_embeddings
    )
    pins_by_id = {p.pin_id: p for p in pins}
    logger.info(
        "engine ready: %d pins, layout %s", len(pins_by_id), model.layout_hash
    )
    return ScoringEngine(model, extractor, pins_by_id, max_batch=config.max_batch)


@dataclass
class ServiceStats:
    """Request counters and handler latencies; updates are lock-guarded."""

    lock: threading.Lock = field(default_factory=threading.Lock)
    requests: int = 0
    errors: int = 0
    latencies_ms: list[float] = field(default_factory=list)

    def record(self, elapsed_ms: float) -> None:
        with self.lock:
            self.requests += 1
            self.latencies_ms.append(elapsed_ms)

    def record_error(self) -> None:
        with self.lock:
            self.errors += 1

    def snapshot(self) -> dict:
        with self.lock:
            requests = self.requests
            errors = self.errors
            latencies = sorted(self.latencies_ms)
        return {
            "requests": requests,
            "errors": errors,
            "latency_ms": {
                "p50": nearest_rank(latencies, 50),
                "p99": nearest_rank(latencies, 99),
            },
        }


def nearest_rank(sorted_values: list[float], percentile: float) -> float:
    """Nearest-rank percentile; 0.0 on an empty sample."""
    if not sorted_values:
        return 0.0
    if not 0 < percentile <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    rank = max(1, int(np.ceil(percentile / 100.0 * len(sorted_values))))
    return float(sorted_values[rank - 1])


class _Handler(BaseHTTPRequestHandler):
    # engine and stats are injected onto the server object by start_service
    server_version = "relsearch/0.1"
    protocol_version = "HTTP/1.1"

    def _send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self) -> None:  # noqa: N802 (stdlib handler naming)
        if self.path == "/healthz":
            self._send_json(200, {"status": "ok"})
        elif self.path == "/stats":
            self._send_json(200, self.server.stats.snapshot())
        else:
            self._send_json(404, {"error": f"unknown path {self.path}"})

    def do_POST(self) -> None:  # noqa: N802
        if self.path != "/v1/score":
            self._send_json(404, {"error": f"unknown path {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            raw = self.rfile.read(length)
            payload = json.loads(raw.decode("utf-8"))
            if not isinstance(payload, dict):
                raise RequestError("request body must be a JSON object")
            if "query_text" not in payload or "pin_ids" not in payload:
                raise RequestError("request needs query_text and pin_ids")
            query_id = payload.get("query_id")
            if query_id is not None and not isinstance(query_id, str):
                raise RequestError("query_id must be a string")
            started = time.perf_counter()
            response = self.server.engine.score_online(
                payload["query_text"], payload["pin_ids"], query_id=query_id
            )
            elapsed_ms = (time.perf_counter() - started) * 1000.0
            self.server.stats.record(elapsed_ms)
            self._send_json(200, response.to_dict())
        except (RequestError, json.JSONDecodeError, UnicodeDecodeError, ValueError) as exc:
            self.server.stats.record_error()
            self._send_json(400, {"error": str(exc)})

    def log_message(self, fmt: str, *args) -> None:
        logger.debug("%s - %s", self.address_string(), fmt % args)


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    # injected after construction
    engine: ScoringEngine
    stats: ServiceStats


@dataclass
class ServiceHandle:
    """A running service; shut down explicitly or via context manager."""

    server: _Server
    thread: threading.Thread
    engine: ScoringEngine
    stats: ServiceStats

    @property
    def address(self) -> tuple[str, int]:
        host, port = self.server.server_address[:2]
        return str(host), int(port)

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def shutdown(self) -> None:
        self.server.shutdown()
        self.thread.join(timeout=10)
        self.server.server_close()

    def __enter__(self) -> "ServiceHandle":
        return self

    def __exit__(self, *exc_info) -> None:
        self.shutdown()


def start_service(config: ServiceConfig, engine: ScoringEngine | None = None) -> ServiceHandle:
    """Load artifacts (unless an engine is injected) and serve in a thread."""
    if engine is None:
        engine = build_engine(config)
    server = _Server((config.host, config.port), _Handler)
    server.engine = engine
    server.stats = ServiceStats()
    thread = threading.Thread(target=server.serve_forever, name="relsearch-http", daemon=True)
    thread.start()
    logger.info("serving on %s:%d", *server.server_address[:2])
    return ServiceHandle(server=server, thread=thread, engine=engine, stats=server.stats)


def serve(config: ServiceConfig) -> None:
    """Blocking entry point used by the CLI; Ctrl-C shuts down cleanly."""
    handle = start_service(config)
    host, port = handle.address
    print(f"listening on http://{host}:{port}")
    try:
        while handle.thread.is_alive():
            handle.thread.join(timeout=0.5)
    except KeyboardInterrupt:
        pass
    finally:
        handle.shutdown()
