"""Query rewriting, per-KB candidate retrieval, reranking and top-K selection."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .conversation import ConversationState
from .gateway import Gateway, GatewayError
from .index import IndexRegistry, UnknownKB

log = logging.getLogger(__name__)

RERANK_SCOPES = ("pooled", "per_kb")


@dataclass
class RetrievalConfig:
    k: int = 10
    candidate_multiplier: int = 2
    kbs: list[str] = field(default_factory=list)
    filter: dict[str, Any] | None = None
    metric: str = "cosine"
    rerank_scope: str = "pooled"

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.candidate_multiplier < 1:
            raise ValueError("candidate_multiplier must be >= 1")
        if self.rerank_scope not in RERANK_SCOPES:
            raise ValueError(f"rerank_scope must be one of {RERANK_SCOPES}")

    @property
    def per_kb(self) -> int:
        return self.candidate_multiplier * self.k

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "RetrievalConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown retrieval config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class RetrievalCandidate:
    chunk_id: str
    kb_id: str
    embed_score: float
    rerank_score: float | None = None
    rank: int = 0
    text: str = ""
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def score(self) -> float:
        return self.rerank_score if self.rerank_score is not None else self.embed_score

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class RetrievalResult:
    query: str
    rewritten_query: str
    candidates: list[RetrievalCandidate]
    pool_size: int
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "v": 1,
            "query": self.query,
            "rewritten_query": self.rewritten_query,
            "pool_size": self.pool_size,
            "candidates": [c.to_dict() for c in self.candidates],
            "flags": list(self.flags),
        }


def _rank(cands: list[RetrievalCandidate]) -> list[RetrievalCandidate]:
    for i, c in enumerate(cands, 1):
        c.rank = i
    return cands


class Retriever:
    def __init__(self, gateway: Gateway, registry: IndexRegistry):
        self.gateway = gateway
        self.registry = registry

    def rewrite_query(self, raw_query: str, state: ConversationState | None = None) -> tuple[str, list[str]]:
        """Gateway rewrite of ``raw_query`` in conversational context; raw query on failure."""
        summary = state.summary if state else ""
        previous = state.turns[-1].text if state and state.turns else ""
        try:
            out = self.gateway.complete("query_rewrite", summary=summary, previous_turn=previous, query=raw_query).strip()
        except GatewayError as exc:
            log.warning("query rewrite failed, using raw query: %s", exc)
            return raw_query, [f"rewrite-fallback: {exc}"]
        if not out:
            return raw_query, ["rewrite-fallback: empty rewrite"]
        return out, []

    def embed_query(self, query: str) -> np.ndarray:
        return self.gateway.embed([query])[0]

    def search(self, query_vector: np.ndarray, config: RetrievalConfig) -> tuple[list[RetrievalCandidate], list[str]]:
        """Hamming top-(multiplier*k) plus rescoring in every KB, merged into one pool."""
        pool: list[RetrievalCandidate] = []
        warnings: list[str] = []
        for kb in config.kbs:
            index = self.registry.get(kb)
            if not len(index):
                continue
            if index.dim != query_vector.size:
                raise ValueError(f"KB {kb!r} has dim {index.dim}, query embedding has {query_vector.size}")
            scored, warn = index.search(query_vector, config.per_kb, config.filter, config.metric)
            warnings.extend(warn)
            pool.extend(
                RetrievalCandidate(c.chunk_id, kb, float(c.score), text=c.text, metadata=dict(c.metadata))
                for c in scored
            )
        pool.sort(key=lambda c: (-c.embed_score, c.kb_id, c.chunk_id))
        return _rank(pool), warnings

    def retrieve(self, query: str, config: RetrievalConfig) -> tuple[list[RetrievalCandidate], list[str]]:
        for kb in config.kbs:
            self.registry.get(kb)  # unknown KBs fail before any gateway call
        if not config.kbs:
            return [], []
        return self.search(self.embed_query(query), config)

    def rerank_and_select(
        self, query: str, candidates: Sequence[RetrievalCandidate], k: int, scope: str = "pooled"
    ) -> tuple[list[RetrievalCandidate], list[str]]:
        """Rerank-score the candidates and keep the best ``k``.

        Order: rerank score desc, embed score desc, chunk id. If the reranker
        fails the pool keeps its embed-score order and a flag is returned.
        """
        cands = [RetrievalCandidate(**{**c.to_dict(), "metadata": dict(c.metadata)}) for c in candidates]
        if not cands:
            return [], []
        flags: list[str] = []
        groups = [cands] if scope == "pooled" else [[c for c in cands if c.kb_id == kb] for kb in dict.fromkeys(c.kb_id for c in cands)]
        try:
            for group in groups:
                scores = self.gateway.rerank(query, [c.text for c in group])
                for c, s in zip(group, scores):
                    c.rerank_score = s
        except GatewayError as exc:
            log.warning("rerank failed, keeping embedding order: %s", exc)
            for c in cands:
                c.rerank_score = None
            cands.sort(key=lambda c: (-c.embed_score, c.chunk_id))
            return _rank(cands[:k]), [f"rerank-fallback: {exc}"]
        cands.sort(key=lambda c: (-c.rerank_score, -c.embed_score, c.chunk_id))
        return _rank(cands[:k]), flags

    def run(self, raw_query: str, config: RetrievalConfig, state: ConversationState | None = None, rewrite: bool = True) -> RetrievalResult:
        flags: list[str] = []
        query = raw_query
        if rewrite:
            query, f = self.rewrite_query(raw_query, state)
            flags += f
        pool, warn = self.retrieve(query, config)
        flags += warn
        final, f = self.rerank_and_select(query, pool, config.k, config.rerank_scope)
        flags += f
        return RetrievalResult(raw_query, query, final, len(pool), flags)


__all__ = ["RetrievalConfig", "RetrievalCandidate", "RetrievalResult", "Retriever", "UnknownKB"]
