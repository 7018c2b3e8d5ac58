"""Grounded answering pipeline and its JSON-over-HTTP front end.

Endpoints::

    GET  /health    -> {"v": 1, "status": "ok"}
    POST /retrieve  {query, k?, kbs?, filter?}     -> ranked candidates
    POST /answer    {query, session_id?, kbs?, k?} -> AnswerResponse

Stage timings are measured with a clock. The ``real`` clock reports
milliseconds of wall time; the ``logical`` clock advances by one per gateway
request, so a stage's "duration" is the number of model calls it made and
repeated runs against deterministic mocks produce identical bytes.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Iterator, Mapping

from .conversation import ConversationManager, ConversationState, TokenBudget
from .gateway import Gateway, GatewayError
from .hallucination import HallucinationPipeline, RevisionTrace
from .index import IndexRegistry, UnknownKB, parse_filter
from .retrieval import RetrievalCandidate, RetrievalConfig, RetrievalResult, Retriever

log = logging.getLogger(__name__)

STAGES = ("rewrite", "embed", "retrieve", "rerank", "generate", "hallucination")


class RequestError(ValueError):
    """Client error: malformed request or unknown resource (HTTP 400)."""


class ServiceUnavailable(RuntimeError):
    """A required gateway stage failed with no fallback (HTTP 503)."""


# ---------------------------------------------------------------------------
# Clocks


class RealClock:
    unit = "ms"

    def now(self) -> float:
        return time.perf_counter() * 1000.0


class LogicalClock:
    """Time = number of requests the gateway has issued."""

    unit = "gateway_calls"

    def __init__(self, gateway: Gateway):
        self.gateway = gateway

    def now(self) -> float:
        return float(len(self.gateway.calls))


class _Timer:
    def __init__(self, clock: RealClock | LogicalClock):
        self.clock = clock
        self.timing: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        t0 = self.clock.now()
        try:
            yield
        finally:
            self.timing[name] = self.timing.get(name, 0.0) + round(self.clock.now() - t0, 3)


# ---------------------------------------------------------------------------
# Responses


@dataclass
class Citation:
    chunk_id: str
    kb_id: str
    score: float

    def to_dict(self) -> dict[str, Any]:
        return {"chunk_id": self.chunk_id, "kb_id": self.kb_id, "score": self.score}


@dataclass
class AnswerResponse:
    answer: str
    citations: list[Citation]
    revision_trace: RevisionTrace | None
    timing: dict[str, float]
    timing_unit: str = "ms"
    session_id: str = "default"
    turn: int = 1
    rewritten_query: str = ""
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "v": 1,
            "session_id": self.session_id,
            "turn": self.turn,
            "answer": self.answer,
            "rewritten_query": self.rewritten_query,
            "citations": [c.to_dict() for c in self.citations],
            "revision_trace": None if self.revision_trace is None else self.revision_trace.to_dict(),
            "timing": dict(self.timing),
            "timing_unit": self.timing_unit,
            "flags": list(self.flags),
        }


# ---------------------------------------------------------------------------
# Pipeline


class SessionStore:
    """In-memory LRU of conversation states, each with its own lock."""

    def __init__(self, capacity: int = 1000):
        self.capacity = capacity
        self._states: OrderedDict[str, tuple[ConversationState, threading.Lock]] = OrderedDict()
        self._lock = threading.Lock()

    def acquire(self, session_id: str) -> tuple[ConversationState, threading.Lock]:
        with self._lock:
            if session_id in self._states:
                self._states.move_to_end(session_id)
            else:
                self._states[session_id] = (ConversationState(session_id), threading.Lock())
                while len(self._states) > self.capacity:
                    evicted, _ = self._states.popitem(last=False)
                    log.info("evicted session %s", evicted)
            return self._states[session_id]

    def __len__(self) -> int:
        return len(self._states)

    def __contains__(self, session_id: str) -> bool:
        return session_id in self._states


class AnswerService:
    """rewrite -> embed -> retrieve -> rerank -> generate -> hallucination check."""

    def __init__(
        self,
        gateway: Gateway,
        registry: IndexRegistry,
        retrieval: RetrievalConfig | None = None,
        budget: TokenBudget | None = None,
        clock: str = "real",
        max_sessions: int = 1000,
        hallucination_check: bool = True,
    ):
        self.gateway = gateway
        self.registry = registry
        self.retrieval = retrieval or RetrievalConfig()
        self.retriever = Retriever(gateway, registry)
        self.manager = ConversationManager(gateway, budget)
        self.sessions = SessionStore(max_sessions)
        self.hallucination_check = hallucination_check
        self.clock: RealClock | LogicalClock = LogicalClock(gateway) if clock == "logical" else RealClock()

    def _config(self, body: Mapping[str, Any]) -> RetrievalConfig:
        cfg = self.retrieval
        kbs = body.get("kbs", cfg.kbs or self.registry.kb_ids())
        if isinstance(kbs, str):
            kbs = [k for k in kbs.split(",") if k]
        if not isinstance(kbs, list) or not all(isinstance(k, str) for k in kbs):
            raise RequestError("'kbs' must be a list of strings")
        k = body.get("k", cfg.k)
        if not isinstance(k, int) or isinstance(k, bool) or k < 1:
            raise RequestError("'k' must be a positive integer")
        flt = body.get("filter", cfg.filter)
        if isinstance(flt, str):
            try:
                flt = parse_filter(flt)
            except ValueError as exc:
                raise RequestError(f"bad filter: {exc}") from exc
        if flt is not None and not isinstance(flt, dict):
            raise RequestError("'filter' must be an object or filter expression")
        for kb in kbs:
            try:
                self.registry.get(kb)
            except UnknownKB:
                raise RequestError(f"unknown KB {kb!r}") from None
        return RetrievalConfig(k, cfg.candidate_multiplier, list(kbs), flt, cfg.metric, cfg.rerank_scope)

    @staticmethod
    def _query(body: Mapping[str, Any]) -> str:
        q = body.get("query")
        if not isinstance(q, str) or not q.strip():
            raise RequestError("'query' must be a non-empty string")
        return q

    def retrieve(self, body: Mapping[str, Any]) -> dict[str, Any]:
        query = self._query(body)
        cfg = self._config(body)
        try:
            pool, flags = self.retriever.retrieve(query, cfg)
        except GatewayError as exc:
            raise ServiceUnavailable(f"embedding failed: {exc}") from exc
        final, f = self.retriever.rerank_and_select(query, pool, cfg.k, cfg.rerank_scope)
        return RetrievalResult(query, query, final, len(pool), flags + f).to_dict()

    def answer(self, body: Mapping[str, Any]) -> AnswerResponse:
        query = self._query(body)
        session_id = body.get("session_id", "default")
        if not isinstance(session_id, str) or not session_id:
            raise RequestError("'session_id' must be a non-empty string")
        cfg = self._config(body)
        state, lock = self.sessions.acquire(session_id)
        with lock:
            return self._answer(state, query, cfg)

    def _answer(self, state: ConversationState, query: str, cfg: RetrievalConfig) -> AnswerResponse:
        timer = _Timer(self.clock)
        flags: list[str] = []

        with timer.stage("summary"):
            self.manager.prepare(state)
        flags += state.flags
        state.flags = []

        with timer.stage("rewrite"):
            rewritten, f = self.retriever.rewrite_query(query, state)
            flags += f
        with timer.stage("embed"):
            try:
                vector = self.retriever.embed_query(rewritten) if cfg.kbs else None
            except GatewayError as exc:
                raise ServiceUnavailable(f"embedding failed: {exc}") from exc
        with timer.stage("retrieve"):
            pool: list[RetrievalCandidate] = []
            if vector is not None:
                pool, f = self.retriever.search(vector, cfg)
                flags += f
        with timer.stage("rerank"):
            final, f = self.retriever.rerank_and_select(rewritten, pool, cfg.k, cfg.rerank_scope)
            flags += f

        with timer.stage("generate"):
            sections = self.manager.assemble_prompt(state, query, final)
            flags += sections.flags
            try:
                answer = self.gateway.complete(
                    "answer",
                    params={"max_tokens": self.manager.budget.response},
                    history=sections.history(),
                    context=sections.numbered_context() or "(no documents retrieved)",
                    query=sections.query,
                )
            except GatewayError as exc:
                raise ServiceUnavailable(f"generation failed: {exc}") from exc

        trace = None
        with timer.stage("hallucination"):
            if self.hallucination_check:
                hp = HallucinationPipeline(self.gateway, self.retriever, cfg)
                trace = hp.run(query, answer, sections.kept_chunks)
                answer = trace.final_answer

        by_id = {c.chunk_id: c for c in final}
        kept = [by_id[c.chunk_id] for c in sections.kept_chunks]
        if trace is not None and trace.final_choice == "revised" and trace.new_candidates:
            kept += [c for c in trace.new_candidates if c.chunk_id not in by_id]
        citations = [Citation(c.chunk_id, c.kb_id, c.score) for c in kept]

        self.manager.record_turn(state, query, answer, [c.chunk_id for c in kept], sections.context or "")
        timing = {s: timer.timing.get(s, 0.0) for s in ("summary", *STAGES)}
        return AnswerResponse(
            answer=answer,
            citations=citations,
            revision_trace=trace,
            timing=timing,
            timing_unit=self.clock.unit,
            session_id=state.session_id,
            turn=len(state.turns),
            rewritten_query=rewritten,
            flags=flags,
        )


# ---------------------------------------------------------------------------
# HTTP


def _dumps(obj: Any) -> bytes:
    return (json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")


class _Handler(BaseHTTPRequestHandler):
    service: AnswerService
    server_version = "groundrag/1"

    def log_message(self, fmt: str, *args: Any) -> None:
        log.info("%s %s", self.address_string(), fmt % args)

    def _send(self, status: int, obj: Any) -> None:
        body = _dumps(obj)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: HTTPStatus, message: str) -> None:
        self._send(status, {"v": 1, "error": status.phrase, "detail": message})

    def do_GET(self) -> None:  # noqa: N802
        if self.path == "/health":
            self._send(HTTPStatus.OK, {"v": 1, "status": "ok"})
        else:
            self._error(HTTPStatus.NOT_FOUND, f"no route {self.path}")

    def do_POST(self) -> None:  # noqa: N802
        routes: dict[str, Callable[[Mapping[str, Any]], Any]] = {
            "/retrieve": self.service.retrieve,
            "/answer": lambda b: self.service.answer(b).to_dict(),
        }
        route = routes.get(self.path)
        if route is None:
            self._error(HTTPStatus.NOT_FOUND, f"no route {self.path}")
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            body = json.loads(self.rfile.read(length) or b"null")
            if not isinstance(body, dict):
                raise RequestError("request body must be a JSON object")
            self._send(HTTPStatus.OK, route(body))
        except (RequestError, json.JSONDecodeError, UnicodeDecodeError) as exc:
            self._error(HTTPStatus.BAD_REQUEST, str(exc))
        except ServiceUnavailable as exc:
            self._error(HTTPStatus.SERVICE_UNAVAILABLE, str(exc))
        except Exception as exc:  # pragma: no cover - defensive
            log.exception("unhandled error")
            self._error(HTTPStatus.INTERNAL_SERVER_ERROR, str(exc))


def make_server(service: AnswerService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    """Bound (not yet serving) HTTP server; ``port=0`` picks a free port."""
    handler = type("Handler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server
