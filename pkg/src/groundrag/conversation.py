"""Rolling-summary conversation state and token-budgeted prompt assembly."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from .gateway import Gateway, GatewayError

TokenCounter = Callable[[str], int]

_WORD = re.compile(r"\S+")
ELLIPSIS = "[...]"


def approx_tokens(text: str) -> int:
    """Whitespace-word count times 4/3, rounded up."""
    return math.ceil(len(text.split()) * 4 / 3)


@dataclass
class TokenBudget:
    query: int = 30_000
    context: int = 7_000
    summary: int = 5_000
    response: int = 15_000
    previous_turn: int = 57_000

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"budget {name} must be positive")

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "TokenBudget":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown budget keys: {sorted(unknown)}")
        return cls(**obj)


def truncate_head(text: str, budget: int, counter: TokenCounter = approx_tokens) -> str:
    """Longest word-boundary prefix of ``text`` within ``budget`` tokens."""
    if counter(text) <= budget:
        return text
    words = list(_WORD.finditer(text))
    lo, hi = 0, len(words)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if counter(text[: words[mid - 1].end()]) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return text[: words[lo - 1].end()] if lo else ""


def truncate_middle(text: str, budget: int, counter: TokenCounter = approx_tokens) -> str:
    """Keep the head and tail of ``text`` around an elision marker, within budget."""
    if counter(text) <= budget:
        return text
    words = list(_WORD.finditer(text))

    def build(k: int) -> str:
        if k <= 0:
            return ELLIPSIS
        head = (k + 1) // 2
        tail = k - head
        out = text[: words[head - 1].end()] + f"\n{ELLIPSIS}\n"
        if tail:
            out += text[words[len(words) - tail].start() :]
        return out

    lo, hi = 0, len(words) - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if counter(build(mid)) <= budget:
            lo = mid
        else:
            hi = mid - 1
    result = build(lo)
    return result if counter(result) <= budget else ""


@dataclass
class Turn:
    query: str
    answer: str
    context_refs: list[str] = field(default_factory=list)
    context: str = ""

    @property
    def text(self) -> str:
        out = f"User: {self.query}\nAssistant: {self.answer}"
        if self.context:
            out += f"\nContext:\n{self.context}"
        return out


@dataclass
class ConversationState:
    session_id: str
    turns: list[Turn] = field(default_factory=list)
    summary: str = ""
    summarized: int = 0  # number of leading turns folded into the summary
    summary_updates: int = 0
    flags: list[str] = field(default_factory=list)

    @property
    def turn_number(self) -> int:
        """Index (1-based) of the turn about to be asked."""
        return len(self.turns) + 1


@dataclass
class ContextChunk:
    chunk_id: str
    text: str
    similarity: float

    @classmethod
    def coerce(cls, obj: Any) -> "ContextChunk":
        if isinstance(obj, ContextChunk):
            return obj
        if isinstance(obj, Mapping):
            sim = obj.get("similarity", obj.get("score", 0.0))
            return cls(str(obj["chunk_id"]), obj["text"], float(sim))
        sim = getattr(obj, "similarity", None)
        if sim is None:
            sim = getattr(obj, "score", 0.0)
        return cls(obj.chunk_id, obj.text, float(sim))


@dataclass
class PromptSections:
    query: str
    summary: str | None = None
    previous_turn: str | None = None
    context: str | None = None
    kept_chunks: list[ContextChunk] = field(default_factory=list)
    dropped_chunks: list[str] = field(default_factory=list)
    tokens: dict[str, int] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def present(self) -> list[str]:
        return [n for n in ("summary", "previous_turn", "context", "query") if getattr(self, n) is not None]

    def history(self) -> str:
        parts = []
        if self.summary is not None:
            parts.append(f"Conversation summary:\n{self.summary}")
        if self.previous_turn is not None:
            parts.append(f"Previous turn:\n{self.previous_turn}")
        return "\n\n".join(parts)

    def numbered_context(self) -> str:
        return "\n\n".join(f"[{i}] {c.text}" for i, c in enumerate(self.kept_chunks, 1))

    def to_dict(self) -> dict[str, Any]:
        return {
            "sections": {n: {"text": getattr(self, n), "tokens": self.tokens[n]} for n in self.present()},
            "kept_chunks": [c.chunk_id for c in self.kept_chunks],
            "dropped_chunks": list(self.dropped_chunks),
            "flags": list(self.flags),
        }


class ConversationManager:
    """Assembles per-turn prompts within fixed section budgets.

    At turn ``t`` the prompt carries a summary of turns ``1..t-2``, turn
    ``t-1`` verbatim, the retrieved context and the query. The summary is
    advanced one turn at a time through the gateway.
    """

    def __init__(self, gateway: Gateway | None, budget: TokenBudget | None = None, counter: TokenCounter = approx_tokens):
        self.gateway = gateway
        self.budget = budget or TokenBudget()
        self.count = counter

    # -- summary -------------------------------------------------------------

    def summary_due(self, state: ConversationState) -> bool:
        return state.summarized < len(state.turns) - 1

    def update_summary(self, state: ConversationState) -> ConversationState:
        """Fold the oldest unsummarized turn (never the latest) into the summary.

        Over-budget output is re-requested once with the strict prompt, then
        truncated. On gateway failure the old summary is kept and flagged;
        the turn still counts as folded.
        """
        if not self.summary_due(state):
            return state
        turn = state.turns[state.summarized]
        state.summarized += 1
        state.summary_updates += 1
        limit = self.budget.summary
        try:
            new = self.gateway.complete("summarize", summary=state.summary, turn=turn.text, max_tokens=limit).strip()
            if self.count(new) > limit:
                state.flags.append(f"summary over budget at turn {state.summarized}; re-prompted")
                new = self.gateway.complete("summarize_strict", summary=new, max_tokens=limit).strip()
        except GatewayError as exc:
            state.flags.append(f"summary update failed at turn {state.summarized}: {exc}")
            return state
        if self.count(new) > limit:
            state.flags.append(f"summary truncated to {limit} tokens at turn {state.summarized}")
            new = truncate_head(new, limit, self.count)
        state.summary = new
        return state

    def prepare(self, state: ConversationState) -> ConversationState:
        while self.summary_due(state):
            self.update_summary(state)
        return state

    # -- assembly ------------------------------------------------------------

    def select_context(self, chunks: Iterable[Any]) -> tuple[list[ContextChunk], list[str]]:
        """Drop the lowest-similarity chunks, whole, until the section fits."""
        ranked = [ContextChunk.coerce(c) for c in chunks]
        order = sorted(range(len(ranked)), key=lambda i: (-ranked[i].similarity, i))
        kept = [ranked[i] for i in order]
        dropped: list[str] = []
        while kept and self.count("\n\n".join(c.text for c in kept)) > self.budget.context:
            dropped.append(kept.pop().chunk_id)
        return kept, dropped

    def assemble_prompt(self, state: ConversationState, new_query: str, retrieved_chunks: Sequence[Any] = ()) -> PromptSections:
        b = self.budget
        flags: list[str] = []

        query = truncate_head(new_query, b.query, self.count)
        if query != new_query:
            flags.append(f"query truncated to {b.query} tokens")
        sections = PromptSections(query=query, flags=flags)

        if state.summary:
            summary = truncate_head(state.summary, b.summary, self.count)
            if summary != state.summary:
                flags.append(f"summary truncated to {b.summary} tokens")
            sections.summary = summary

        if state.turns:
            prev = state.turns[-1].text
            kept_prev = truncate_middle(prev, b.previous_turn, self.count)
            if kept_prev != prev:
                flags.append(f"previous turn truncated from the middle to {b.previous_turn} tokens")
            sections.previous_turn = kept_prev

        kept, dropped = self.select_context(retrieved_chunks)
        if dropped:
            flags.append(f"dropped {len(dropped)} low-similarity context chunk(s)")
        if kept:
            sections.context = "\n\n".join(c.text for c in kept)
        sections.kept_chunks = kept
        sections.dropped_chunks = dropped

        sections.tokens = {n: self.count(getattr(sections, n)) for n in sections.present()}
        return sections

    def record_turn(
        self,
        state: ConversationState,
        query: str,
        answer: str,
        context_refs: Sequence[str] = (),
        context: str = "",
    ) -> ConversationState:
        state.turns.append(Turn(query, answer, list(context_refs), context))
        return state


def replay(rows: Iterable[Mapping[str, Any]], manager: ConversationManager) -> list[dict[str, Any]]:
    """Run a scripted dialogue and return one trace per turn.

    Each row holds ``query`` plus optional ``session_id``, ``answer`` and
    ``chunks`` (``chunk_id``, ``text``, ``similarity``). Missing answers
    are generated with the ``answer`` prompt.
    """
    states: dict[str, ConversationState] = {}
    traces = []
    for row in rows:
        sid = str(row.get("session_id", "default"))
        state = states.setdefault(sid, ConversationState(sid))
        manager.prepare(state)
        sections = manager.assemble_prompt(state, row["query"], row.get("chunks", []))
        answer = row.get("answer")
        if answer is None:
            answer = manager.gateway.complete(
                "answer",
                params={"max_tokens": manager.budget.response},
                history=sections.history(),
                context=sections.numbered_context(),
                query=sections.query,
            )
        trace = {
            "session_id": sid,
            "turn": state.turn_number,
            **sections.to_dict(),
            "summarizer_calls": state.summary_updates,
            "answer": answer,
        }
        trace["flags"] = trace["flags"] + state.flags
        state.flags = []
        traces.append(trace)
        manager.record_turn(state, row["query"], answer, [c.chunk_id for c in sections.kept_chunks], sections.context or "")
    return traces
