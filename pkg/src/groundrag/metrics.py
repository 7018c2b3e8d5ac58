"""Retrieval, OCR, MCQA, hallucination and judge metrics.

Token-level retrieval metrics work on word positions: a document is split
into whitespace-delimited words, and a character range covers every word it
overlaps. Retrieved positions are a multiset (the same word retrieved in two
chunks counts twice in the retrieved total, once in the intersection).
"""

from __future__ import annotations

import bisect
import math
import re
from dataclasses import dataclass, field
from typing import Any, Hashable, Iterable, Mapping, Sequence

import numpy as np

from .gateway import Gateway, GatewayError, JudgeParseError, loads_object

_WORD = re.compile(r"\S+")

Range = tuple[str, int, int]  # (doc_id, start, end) character range


class MetricError(ValueError):
    pass


@dataclass
class RetrievalEvalSample:
    query: str
    gold_excerpts: list[Range]
    retrieved_chunks: list[Range]
    query_id: str = ""

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "RetrievalEvalSample":
        def ranges(items):
            out = []
            for it in items:
                if isinstance(it, Mapping):
                    out.append((str(it["doc_id"]), int(it["start"]), int(it["end"])))
                else:
                    d, s, e = it
                    out.append((str(d), int(s), int(e)))
            return out

        return cls(
            query=obj.get("query", ""),
            gold_excerpts=ranges(obj.get("gold_excerpts", [])),
            retrieved_chunks=ranges(obj.get("retrieved_chunks", obj.get("retrieved", []))),
            query_id=str(obj.get("query_id", obj.get("id", ""))),
        )


class TokenIndex:
    """Word spans of a set of documents, for mapping character ranges to positions."""

    def __init__(self, documents: Mapping[str, str]):
        self._starts: dict[str, list[int]] = {}
        self._ends: dict[str, list[int]] = {}
        for doc_id, text in documents.items():
            spans = [(m.start(), m.end()) for m in _WORD.finditer(text)]
            self._starts[doc_id] = [s for s, _ in spans]
            self._ends[doc_id] = [e for _, e in spans]
        self.lengths = {d: len(text) for d, text in documents.items()}

    def positions(self, doc_id: str, start: int, end: int) -> range:
        if doc_id not in self._starts:
            raise MetricError(f"unknown document {doc_id!r}")
        if not 0 <= start <= end <= self.lengths[doc_id]:
            raise MetricError(f"range {start}..{end} outside document {doc_id!r}")
        # words with word_end > start and word_start < end
        lo = bisect.bisect_right(self._ends[doc_id], start)
        hi = bisect.bisect_left(self._starts[doc_id], end)
        return range(lo, max(lo, hi))


@dataclass
class TokenScores:
    iou: float
    precision: float
    recall: float
    intersection: int
    retrieved: int
    gold: int


def token_scores(retrieved: Sequence[Iterable[Hashable]], gold: Iterable[Hashable]) -> TokenScores:
    """IoU/precision/recall from per-chunk position lists and gold positions."""
    gold_set = set(gold)
    if not gold_set:
        raise MetricError("empty gold set: recall undefined")
    total = 0
    seen: set = set()
    for chunk in retrieved:
        chunk = list(chunk)
        total += len(chunk)
        seen.update(chunk)
    inter = len(seen & gold_set)
    union = total + len(gold_set - seen)
    return TokenScores(
        iou=inter / union if union else 0.0,
        precision=inter / total if total else 0.0,
        recall=inter / len(gold_set),
        intersection=inter,
        retrieved=total,
        gold=len(gold_set),
    )


def _positions(tokens: TokenIndex, ranges: Iterable[Range]) -> list[list[tuple[str, int]]]:
    return [[(d, p) for p in tokens.positions(d, s, e)] for d, s, e in ranges]


def token_metrics(sample: RetrievalEvalSample, tokens: TokenIndex, at: int | None = None) -> TokenScores:
    retrieved = sample.retrieved_chunks[:at] if at else sample.retrieved_chunks
    gold = [p for chunk in _positions(tokens, sample.gold_excerpts) for p in chunk]
    return token_scores(_positions(tokens, retrieved), gold)


def relevance_flags(sample: RetrievalEvalSample, tokens: TokenIndex, at: int | None = None) -> list[bool]:
    """Per retrieved chunk (in rank order): does it contain any gold word?"""
    gold = {p for chunk in _positions(tokens, sample.gold_excerpts) for p in chunk}
    retrieved = sample.retrieved_chunks[:at] if at else sample.retrieved_chunks
    return [bool(gold.intersection(chunk)) for chunk in _positions(tokens, retrieved)]


def passage_recall(flags: Sequence[bool]) -> float:
    """Fraction of retrieved chunks holding at least one relevant word."""
    return sum(flags) / len(flags) if flags else 0.0


def doc_recall(sample: RetrievalEvalSample, tokens: TokenIndex, at: int | None = None) -> float:
    """Fraction of gold documents with at least one relevant retrieved chunk."""
    gold_docs = {d for d, _, _ in sample.gold_excerpts}
    if not gold_docs:
        raise MetricError("empty gold set: doc recall undefined")
    retrieved = sample.retrieved_chunks[:at] if at else sample.retrieved_chunks
    hit_docs = {r[0] for r, rel in zip(retrieved, relevance_flags(sample, tokens, at)) if rel}
    return len(gold_docs & hit_docs) / len(gold_docs)


def doc_passage_recall(
    samples: Sequence[RetrievalEvalSample], tokens: TokenIndex, at: int | None = None
) -> tuple[float, float]:
    """Macro-averaged (doc_recall, passage_recall) over samples."""
    if not samples:
        raise MetricError("empty sample set")
    dr = [doc_recall(s, tokens, at) for s in samples]
    pr = [passage_recall(relevance_flags(s, tokens, at)) for s in samples]
    return math.fsum(dr) / len(dr), math.fsum(pr) / len(pr)


def ref_retrieved_ratio_at(relevance: Sequence[Sequence[bool]], n: int = 10) -> float:
    """Fraction of queries with a relevant chunk among the first ``n``."""
    if not relevance:
        raise MetricError("empty sample set")
    return sum(any(r[:n]) for r in relevance) / len(relevance)


def first_relevant_rank(flags: Sequence[bool]) -> int | None:
    return next((i for i, f in enumerate(flags, 1) if f), None)


def mrr_at(relevance: Sequence[Sequence[bool]], n: int = 10) -> float:
    """Mean of 1/rank of the first relevant chunk, 0 when it lies beyond ``n``."""
    if not relevance:
        raise MetricError("empty sample set")
    total = 0.0
    for flags in relevance:
        rank = first_relevant_rank(flags)
        if rank is not None and rank <= n:
            total += 1.0 / rank
    return total / len(relevance)


# ---------------------------------------------------------------------------
# OCR


def levenshtein(a: str, b: str) -> int:
    """Edit distance with unit costs; rows are updated with numpy."""
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    bv = np.frombuffer(b.encode("utf-32-le"), dtype=np.uint32)
    offs = np.arange(len(b) + 1, dtype=np.int64)
    prev = offs.copy()
    for i, ch in enumerate(a, 1):
        cost = (bv != ord(ch)).astype(np.int64)
        cur = np.empty_like(prev)
        cur[0] = i
        cur[1:] = np.minimum(prev[1:] + 1, prev[:-1] + cost)
        # insertions: cur[j] = min_k<=j (cur[k] + j - k)
        cur = np.minimum.accumulate(cur - offs) + offs
        prev = cur
    return int(prev[-1])


def nls(pred: str, gold: str) -> float:
    """1 - edit distance / longer length; two empty strings score 1."""
    longest = max(len(pred), len(gold))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(pred, gold) / longest


# ---------------------------------------------------------------------------
# Answers


def win_rate(tallies: Sequence[tuple[int, int, int]]) -> float:
    """Mean over evaluators of (wins + ties/2) / (wins + ties + losses).

    ``tallies`` holds one ``(wins_A, ties, losses_A)`` triple per evaluator.
    """
    if not tallies:
        raise MetricError("win rate needs at least one evaluator")
    total = 0.0
    for i, (w, t, l) in enumerate(tallies):
        if min(w, t, l) < 0:
            raise MetricError(f"evaluator {i}: negative count")
        denom = w + t + l
        if denom == 0:
            raise MetricError(f"evaluator {i}: no comparisons")
        total += (w + 0.5 * t) / denom
    return total / len(tallies)


def mcqa_score(predictions: Sequence[Iterable[str]], gold: Sequence[Iterable[str]]) -> tuple[float, float]:
    """(exact-set accuracy, mean option-set IoU) over samples."""
    if len(predictions) != len(gold):
        raise MetricError("predictions and gold differ in length")
    if not gold:
        raise MetricError("empty sample set")
    acc = 0
    ious = []
    for p, g in zip(predictions, gold):
        p, g = {x.strip().upper() for x in p}, {x.strip().upper() for x in g}
        acc += p == g
        union = p | g
        ious.append(len(p & g) / len(union) if union else 1.0)
    return acc / len(gold), math.fsum(ious) / len(ious)


def _positive(label: Any) -> bool:
    if isinstance(label, str):
        return label.strip().lower() in ("hallucinated", "1", "true", "yes")
    return bool(label)


def hallucination_f1(labels_pred: Sequence[Any], labels_gold: Sequence[Any]) -> float:
    """F1 of the hallucinated class; 0 when there are no true positives."""
    if len(labels_pred) != len(labels_gold):
        raise MetricError("label sequences differ in length")
    tp = fp = fn = 0
    for p, g in zip(labels_pred, labels_gold):
        p, g = _positive(p), _positive(g)
        tp += p and g
        fp += p and not g
        fn += g and not p
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


@dataclass
class PanelScore:
    mean: float | None
    per_judge: dict[str, float | None] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)


def judge_panel_score(
    question: str,
    answer: str,
    reference: str,
    judges: Mapping[str, Gateway],
    context: str | None = None,
) -> PanelScore:
    """Average of each judge's 0-5 score scaled to 0-100.

    Judges whose reply cannot be parsed (or whose call fails) are left out
    of the mean and flagged; if none succeed ``mean`` is None.
    """
    if not judges:
        raise MetricError("judge panel is empty")
    per: dict[str, float | None] = {}
    flags = []
    for name, gw in judges.items():
        try:
            per[name] = 20.0 * gw.judge(question, answer, reference, context)
        except GatewayError as exc:
            per[name] = None
            flags.append(f"judge {name}: {exc}")
    ok = [v for v in per.values() if v is not None]
    if not ok:
        flags.append("all judges failed")
    return PanelScore(math.fsum(ok) / len(ok) if ok else None, per, flags)


def pairwise_preference(gateway: Gateway, question: str, reference: str, answer_a: str, answer_b: str) -> str:
    """One judge's verdict: ``"A"``, ``"B"`` or ``"tie"``."""
    reply = gateway.generate(
        gateway.prompts.render("pairwise_judge", question=question, reference=reference, answer_a=answer_a, answer_b=answer_b),
        prompt_id="pairwise_judge",
        role="judge",
        temperature=0,
    )
    obj = loads_object(reply)
    winner = str(obj.get("winner", "")).strip() if obj else reply.strip()
    if winner.upper() in ("A", "B"):
        return winner.upper()
    if winner.lower() == "tie":
        return "tie"
    raise JudgeParseError(f"unparsable pairwise verdict: {reply[:80]!r}")
