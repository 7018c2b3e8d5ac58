"""Detect, reformulate, re-retrieve, revise and rank: answer revision for flagged answers.

Every failure degrades toward keeping the original answer and leaves a flag
on the trace; the pipeline itself never raises on gateway errors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

from .gateway import Gateway, GatewayError, loads_object
from .retrieval import RetrievalCandidate, RetrievalConfig, Retriever

log = logging.getLogger(__name__)

HALLUCINATED = "hallucinated"
GROUNDED = "grounded"

# state -> allowed successors
TRANSITIONS: dict[str, tuple[str, ...]] = {
    "start": ("detect",),
    "detect": ("end", "reformulate"),
    "reformulate": ("retrieve",),
    "retrieve": ("revise",),
    "revise": ("rank",),
    "rank": ("end",),
}


def is_legal_path(step_log: Sequence[str]) -> bool:
    state = "start"
    for step in step_log:
        if step not in TRANSITIONS.get(state, ()):
            return False
        state = step
    return state == "end"


@dataclass
class HallucinationVerdict:
    label: str
    justification: str = ""

    def __post_init__(self) -> None:
        if self.label not in (HALLUCINATED, GROUNDED):
            raise ValueError(f"bad verdict label {self.label!r}")
        if self.label == HALLUCINATED and not self.justification.strip():
            raise ValueError("a hallucinated verdict needs a justification")


@dataclass
class RevisionTrace:
    question: str
    original_answer: str
    verdict: HallucinationVerdict
    reformulated_query: str | None = None
    new_candidates: list[RetrievalCandidate] | None = None
    revised_answer: str | None = None
    critique: str | None = None
    final_choice: str = "original"
    step_log: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    @property
    def final_answer(self) -> str:
        if self.final_choice == "revised" and self.revised_answer is not None:
            return self.revised_answer
        return self.original_answer

    def to_dict(self) -> dict[str, Any]:
        return {
            "v": 1,
            "question": self.question,
            "original_answer": self.original_answer,
            "verdict": {"label": self.verdict.label, "justification": self.verdict.justification},
            "reformulated_query": self.reformulated_query,
            "new_candidates": None if self.new_candidates is None else [c.to_dict() for c in self.new_candidates],
            "revised_answer": self.revised_answer,
            "critique": self.critique,
            "final_choice": self.final_choice,
            "final_answer": self.final_answer,
            "step_log": list(self.step_log),
            "flags": list(self.flags),
        }


def format_evidence(evidence: Sequence[Any]) -> str:
    if not evidence:
        return "(no evidence retrieved)"
    texts = [e if isinstance(e, str) else e.text for e in evidence]
    return "\n\n".join(f"[{i}] {t}" for i, t in enumerate(texts, 1))


class HallucinationPipeline:
    def __init__(self, gateway: Gateway, retriever: Retriever | None, retrieval_config: RetrievalConfig | None = None):
        self.gateway = gateway
        self.retriever = retriever
        self.config = retrieval_config or RetrievalConfig()

    def detect(self, question: str, answer: str, evidence: Sequence[Any]) -> tuple[HallucinationVerdict, list[str]]:
        """Fact-check ``answer``; unparsable or failed checks count as hallucinated."""
        try:
            reply = self.gateway.complete("hallucination_detect", question=question, answer=answer, evidence=format_evidence(evidence))
        except GatewayError as exc:
            return HallucinationVerdict(HALLUCINATED, "detector-failure"), [f"detect-failure: {exc}"]
        obj = loads_object(reply)
        label = str(obj.get("label", "")).strip().lower() if obj else ""
        if label not in (HALLUCINATED, GROUNDED):
            return HallucinationVerdict(HALLUCINATED, "parse-failure"), ["detect-parse-failure"]
        justification = str(obj.get("justification") or "").strip()
        if label == HALLUCINATED and not justification:
            justification = "unspecified"
        return HallucinationVerdict(label, justification), []

    def reformulate(self, question: str, justification: str) -> tuple[str, list[str]]:
        try:
            out = self.gateway.complete("hallucination_reformulate", question=question, justification=justification).strip()
        except GatewayError as exc:
            return question, [f"reformulate-failure: {exc}"]
        if not out:
            return question, ["reformulate-failure: empty reply"]
        return out, []

    def retrieve(self, query: str) -> tuple[list[RetrievalCandidate], list[str]]:
        if self.retriever is None or not self.config.kbs:
            return [], []
        try:
            pool, flags = self.retriever.retrieve(query, self.config)
        except GatewayError as exc:
            return [], [f"re-retrieval-failure: {exc}"]
        final, f = self.retriever.rerank_and_select(query, pool, self.config.k, self.config.rerank_scope)
        return final, flags + f

    def revise(
        self, question: str, original_answer: str, prior_evidence: Sequence[Any], new_evidence: Sequence[Any]
    ) -> tuple[str | None, str | None, list[str]]:
        try:
            reply = self.gateway.complete(
                "hallucination_revise",
                question=question,
                original_answer=original_answer,
                prior_evidence=format_evidence(prior_evidence),
                new_evidence=format_evidence(new_evidence),
            )
        except GatewayError as exc:
            return None, None, [f"revise-failure: {exc}"]
        obj = loads_object(reply)
        if obj and str(obj.get("revised_answer") or "").strip():
            critique = obj.get("critique")
            return str(obj["revised_answer"]).strip(), None if critique is None else str(critique), []
        if reply.strip() and obj is None:
            return reply.strip(), None, ["revise-unstructured"]
        return None, None, ["revise-failure: no revised answer in reply"]

    def rank_and_select(
        self, question: str, original: str, revised: str, evidence: Sequence[Any], critique: str | None = None
    ) -> tuple[str, list[str]]:
        """Gateway picks the more reliable answer; a tie goes to the revision."""
        try:
            reply = self.gateway.complete(
                "hallucination_rank",
                question=question,
                evidence=format_evidence(evidence),
                critique=critique or "(none)",
                original=original,
                revised=revised,
            )
        except GatewayError as exc:
            return "original", [f"rank-failure: {exc}"]
        obj = loads_object(reply)
        choice = str(obj.get("choice", "")).strip().lower() if obj else reply.strip().lower()
        if choice in ("revised", "tie"):
            return "revised", []
        if choice == "original":
            return "original", []
        return "original", ["rank-parse-failure"]

    def run(self, question: str, answer: str, evidence: Sequence[Any] = ()) -> RevisionTrace:
        verdict, flags = self.detect(question, answer, evidence)
        trace = RevisionTrace(question, answer, verdict, step_log=["detect"], flags=flags)
        if verdict.label == GROUNDED:
            trace.step_log.append("end")
            return trace

        trace.reformulated_query, f = self.reformulate(question, verdict.justification)
        trace.flags += f
        trace.step_log.append("reformulate")

        trace.new_candidates, f = self.retrieve(trace.reformulated_query)
        trace.flags += f
        trace.step_log.append("retrieve")

        trace.revised_answer, trace.critique, f = self.revise(question, answer, evidence, trace.new_candidates)
        trace.flags += f
        trace.step_log.append("revise")

        if trace.revised_answer is None:
            trace.final_choice = "original"
            trace.flags.append("rank-forfeit: no revised answer")
        else:
            combined = list(evidence) + list(trace.new_candidates)
            trace.final_choice, f = self.rank_and_select(question, answer, trace.revised_answer, combined, trace.critique)
            trace.flags += f
        trace.step_log += ["rank", "end"]
        return trace
