"""Deterministic stand-ins for every gateway role.

All mocks are transports: callables taking ``(role, request)`` and returning
the same wire-shaped dict a real endpoint would, so the gateway's parsing
and retry code runs unchanged under test.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .core import GatewayHTTPError, ScriptedMockError

_TOKEN = re.compile(r"\w+")
_SENTENCE_END = re.compile(r"[.!?](?=\s|$)")


def chat_reply(text: str) -> dict:
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


def wire(role: str, value: Any) -> dict:
    """Wrap a plain value in the response shape for ``role``."""
    if isinstance(value, dict):
        return value
    if role in ("chat", "judge"):
        return chat_reply(value if isinstance(value, str) else json.dumps(value))
    if role == "embed":
        return {"vectors": [list(map(float, v)) for v in value]}
    if role == "rerank":
        return {"scores": [float(s) for s in value]}
    raise ValueError(f"cannot wrap a {type(value).__name__} for role {role!r}")


def request_text(request: dict) -> str:
    """All human-readable text of a request, for substring matching."""
    parts = [m.get("content", "") for m in request.get("messages", [])]
    parts.append(request.get("query", ""))
    parts.extend(request.get("texts", []))
    parts.extend(request.get("passages", []))
    return "\n".join(p for p in parts if p)


def last_user_message(request: dict) -> str:
    msgs = [m for m in request.get("messages", []) if m.get("role") == "user"]
    return msgs[-1]["content"] if msgs else ""


# -- matchers ---------------------------------------------------------------


def any_request(request: dict) -> bool:
    return True


def prompt_id(pid: str) -> Callable[[dict], bool]:
    def match(request: dict) -> bool:
        return request.get("metadata", {}).get("prompt_id") == pid

    match.__name__ = f"prompt_id({pid!r})"
    return match


def contains(needle: str) -> Callable[[dict], bool]:
    def match(request: dict) -> bool:
        return needle in request_text(request)

    match.__name__ = f"contains({needle!r})"
    return match


def all_of(*matchers: Callable[[dict], bool]) -> Callable[[dict], bool]:
    return lambda request: all(m(request) for m in matchers)


@dataclass
class Rule:
    matcher: Callable[[dict], bool]
    response: Any
    times: int | None = None
    used: int = 0

    def live(self) -> bool:
        return self.times is None or self.used < self.times


class ScriptedMock:
    """Replies from an ordered script of ``(matcher, response)`` rules.

    The first live rule whose matcher accepts the request answers it. A
    response may be a wire dict, a plain value (wrapped per role), an
    exception (raised), or a callable of the request returning any of
    those. ``times`` limits how often a rule fires. Requests no rule
    matches raise :class:`ScriptedMockError`; every request, answered or
    not, is appended to ``call_log``.
    """

    def __init__(self, script: Sequence[tuple] = (), role: str | None = None):
        self.role = role
        self.rules = [r if isinstance(r, Rule) else Rule(*r) for r in script]
        self.call_log: list[tuple[str, dict]] = []
        self._lock = threading.Lock()

    def when(self, matcher: Callable[[dict], bool], response: Any, times: int | None = None) -> "ScriptedMock":
        self.rules.append(Rule(matcher, response, times))
        return self

    def __call__(self, role: str, request: dict) -> dict:
        with self._lock:
            self.call_log.append((role, request))
            rule = next((r for r in self.rules if r.live() and r.matcher(request)), None)
            if rule is None:
                raise ScriptedMockError(f"no scripted response for {role} request: {request_text(request)[:120]!r}")
            rule.used += 1
        response = rule.response
        if callable(response) and not isinstance(response, type):
            response = response(request)
        if isinstance(response, BaseException) or (isinstance(response, type) and issubclass(response, BaseException)):
            raise response
        return wire(role, response)

    @property
    def calls(self) -> int:
        return len(self.call_log)


class EchoChat:
    """Returns the prompt unchanged."""

    def __init__(self) -> None:
        self.call_log: list[tuple[str, dict]] = []
        self._lock = threading.Lock()

    def __call__(self, role: str, request: dict) -> dict:
        with self._lock:
            self.call_log.append((role, request))
        return chat_reply(last_user_message(request))


def hash_embed(text: str, dim: int) -> list[float]:
    """Signed feature hashing of lower-cased word tokens, L2-normalised."""
    vec = np.zeros(dim, dtype=np.float64)
    for tok in _TOKEN.findall(text.lower()):
        h = int.from_bytes(hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest(), "little")
        vec[h % dim] += 1.0 if (h >> 63) & 1 else -1.0
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec.tolist()


class HashingEmbedder:
    """Deterministic bag-of-words embedder; empty input is rejected with HTTP 400."""

    def __init__(self, dim: int = 64):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.call_log: list[tuple[str, dict]] = []
        self._lock = threading.Lock()

    def __call__(self, role: str, request: dict) -> dict:
        with self._lock:
            self.call_log.append((role, request))
        texts = request.get("texts", [])
        if any(not t.strip() for t in texts):
            raise GatewayHTTPError(400, "empty text cannot be embedded")
        return {"vectors": [hash_embed(t, self.dim) for t in texts]}


def shared_words(a: str, b: str) -> int:
    return len(set(_TOKEN.findall(a.lower())) & set(_TOKEN.findall(b.lower())))


class LexicalReranker:
    """Scores each passage by the number of distinct words it shares with the query."""

    def __init__(self) -> None:
        self.call_log: list[tuple[str, dict]] = []
        self._lock = threading.Lock()

    def __call__(self, role: str, request: dict) -> dict:
        with self._lock:
            self.call_log.append((role, request))
        q = request["query"]
        return {"scores": [float(shared_words(q, p)) for p in request["passages"]]}


def _between(text: str, start: str, end: str | None = None) -> str:
    i = text.find(start)
    if i < 0:
        return ""
    i += len(start)
    j = text.find(end, i) if end else -1
    return (text[i:j] if j >= 0 else text[i:]).strip()


def _first_sentence(text: str, max_words: int = 40) -> str:
    m = _SENTENCE_END.search(text)
    s = (text[: m.start() + 1] if m else text).strip()
    return " ".join(s.split()[:max_words])


def _overlap_f1(answer: str, reference: str) -> float:
    a = _TOKEN.findall(answer.lower())
    r = _TOKEN.findall(reference.lower())
    if not a or not r:
        return 0.0
    common = len(set(a) & set(r))
    if common == 0:
        return 0.0
    p, rec = common / len(set(a)), common / len(set(r))
    return 2 * p * rec / (p + rec)


class StackChat:
    """Chat mock for the full stack: answers each known prompt id deterministically.

    Unknown prompt ids are echoed back.
    """

    def __init__(self, summary_words: int = 120):
        self.summary_words = summary_words
        self.call_log: list[tuple[str, dict]] = []
        self._lock = threading.Lock()

    def __call__(self, role: str, request: dict) -> dict:
        with self._lock:
            self.call_log.append((role, request))
        pid = request.get("metadata", {}).get("prompt_id")
        text = last_user_message(request)
        handler = getattr(self, f"_{pid}", None) if pid else None
        return chat_reply(handler(text) if handler else text)

    def _query_rewrite(self, text: str) -> str:
        return _between(text, "\nQuery:").splitlines()[0] if _between(text, "\nQuery:") else ""

    def _answer(self, text: str) -> str:
        query = _between(text, "\nQuestion:")
        ctx = _between(text, "Retrieved context:", "\nQuestion:")
        m = re.search(r"\[(\d+)\]\s*(.+)", ctx)
        if not m:
            return f"I could not find documents that answer: {query}"
        return f"According to [{m.group(1)}], {_first_sentence(m.group(2))}"

    def _hallucination_detect(self, text: str) -> str:
        return json.dumps({"label": "grounded", "justification": ""})

    def _hallucination_reformulate(self, text: str) -> str:
        return _between(text, "Question:", "\nJustification:")

    def _hallucination_revise(self, text: str) -> str:
        orig = _between(text, "Original answer:", "\nPrior evidence:")
        return json.dumps({"revised_answer": orig, "critique": "no unsupported claims found"})

    def _hallucination_rank(self, text: str) -> str:
        return json.dumps({"choice": "original"})

    def _summarize(self, text: str) -> str:
        old = _between(text, "Current summary:", "\nLatest turn:")
        turn = _between(text, "Latest turn:")
        user = _between(turn, "User:", "\nAssistant:")
        bits = [b for b in (old, f"User asked: {_first_sentence(user, 30)}") if b]
        words = " ".join(bits).split()
        return " ".join(words[-self.summary_words :])

    def _summarize_strict(self, text: str) -> str:
        summary = _between(text, "Summary:")
        return " ".join(summary.split()[: self.summary_words // 2])

    def _eval_query_generation(self, text: str) -> str:
        passage = _between(text, "Passage:", "\nRespond with")
        excerpt = _first_sentence(passage, 25)
        words = excerpt.split()
        question = "What does the passage state about " + " ".join(words[:6]).rstrip(".,;:") + "?"
        return json.dumps({"question": question, "excerpt": excerpt})

    def _pairwise_judge(self, text: str) -> str:
        return LexicalJudge.compare(text)


class LexicalJudge:
    """Judge mock: score = round(5 x word-overlap F1 with the reference)."""

    def __init__(self, constant: int | None = None):
        self.constant = constant
        self.call_log: list[tuple[str, dict]] = []
        self._lock = threading.Lock()

    def __call__(self, role: str, request: dict) -> dict:
        with self._lock:
            self.call_log.append((role, request))
        text = last_user_message(request)
        if request.get("metadata", {}).get("prompt_id") == "pairwise_judge":
            return chat_reply(self.compare(text))
        if self.constant is not None:
            return chat_reply(json.dumps({"score": self.constant, "reason": "constant mock"}))
        answer = _between(text, 'Answer: "', '"\nReference:')
        reference = _between(text, 'Reference: "', '"\n')
        score = int(round(5 * _overlap_f1(answer, reference)))
        return chat_reply(json.dumps({"score": score, "reason": "lexical overlap with reference"}))

    @staticmethod
    def compare(text: str) -> str:
        reference = _between(text, 'Reference: "', '"\n')
        a = _between(text, 'Answer A: "', '"\nAnswer B:')
        b = _between(text, 'Answer B: "', '"\n')
        fa, fb = _overlap_f1(a, reference), _overlap_f1(b, reference)
        winner = "tie" if abs(fa - fb) < 1e-12 else ("A" if fa > fb else "B")
        return json.dumps({"winner": winner, "reason": "lexical overlap with reference"})


@dataclass
class MockStack:
    chat: StackChat = field(default_factory=StackChat)
    embed: HashingEmbedder = field(default_factory=HashingEmbedder)
    rerank: LexicalReranker = field(default_factory=LexicalReranker)
    judge: LexicalJudge = field(default_factory=LexicalJudge)

    def transports(self) -> dict[str, Callable[[str, dict], dict]]:
        return {"chat": self.chat, "embed": self.embed, "rerank": self.rerank, "judge": self.judge}


def mock_transports(embed_dim: int = 64) -> dict[str, Callable[[str, dict], dict]]:
    return MockStack(embed=HashingEmbedder(embed_dim)).transports()
