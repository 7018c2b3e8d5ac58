"""Evaluation runners producing :class:`EvalReport` objects."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .chunker import Chunk
from .gateway import Gateway, GatewayError, loads_object
from .metrics import (
    MetricError,
    RetrievalEvalSample,
    TokenIndex,
    doc_recall,
    first_relevant_rank,
    judge_panel_score,
    mrr_at,
    nls,
    pairwise_preference,
    passage_recall,
    ref_retrieved_ratio_at,
    relevance_flags,
    token_metrics,
    win_rate,
)

# Allowed value range per metric name.
METRIC_RANGES: dict[str, tuple[float, float]] = {
    "iou": (0.0, 1.0),
    "precision": (0.0, 1.0),
    "recall": (0.0, 1.0),
    "doc_recall": (0.0, 1.0),
    "passage_recall": (0.0, 1.0),
    "rrr": (0.0, 1.0),
    "mrr": (0.0, 1.0),
    "nls": (0.0, 1.0),
    "judge": (0.0, 100.0),
    "win_rate": (0.0, 1.0),
    "accuracy": (0.0, 1.0),
    "iou_multi": (0.0, 1.0),
    "f1": (0.0, 1.0),
}


def _base(name: str) -> str:
    return name.split("@")[0].split(":")[0]


@dataclass
class EvalReport:
    kind: str
    metrics: dict[str, float]
    per_sample: list[dict[str, Any]] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        for name, value in self.metrics.items():
            lo, hi = METRIC_RANGES.get(_base(name), (-math.inf, math.inf))
            if value is None or not lo <= value <= hi:
                raise MetricError(f"metric {name}={value} outside [{lo}, {hi}]")

    def to_dict(self) -> dict[str, Any]:
        return {
            "v": 1,
            "kind": self.kind,
            "metrics": dict(self.metrics),
            "per_sample": list(self.per_sample),
            "config": dict(self.config),
            "flags": list(self.flags),
        }


def evaluate_retrieval(
    samples: Sequence[RetrievalEvalSample],
    documents: Mapping[str, str],
    at: int = 10,
    average: str = "macro",
) -> EvalReport:
    """Token IoU/precision/recall, doc/passage recall, RRR@at and MRR@at.

    Samples with no gold excerpt are excluded from every metric and listed
    in ``flags``.
    """
    if average not in ("macro", "micro"):
        raise ValueError("average must be 'macro' or 'micro'")
    tokens = TokenIndex(documents)
    rows, flags, relevance = [], [], []
    inter = retrieved = gold = 0
    for s in samples:
        qid = s.query_id or s.query
        if not s.gold_excerpts:
            flags.append(f"excluded {qid!r}: empty gold")
            continue
        ts = token_metrics(s, tokens, at)
        rel = relevance_flags(s, tokens, at)
        relevance.append(relevance_flags(s, tokens))
        inter, retrieved, gold = inter + ts.intersection, retrieved + ts.retrieved, gold + ts.gold
        rows.append(
            {
                "query_id": qid,
                "iou": ts.iou,
                "precision": ts.precision,
                "recall": ts.recall,
                "doc_recall": doc_recall(s, tokens, at),
                "passage_recall": passage_recall(rel),
                "first_relevant_rank": first_relevant_rank(relevance[-1]),
            }
        )
    if not rows:
        raise MetricError("no evaluable samples")

    def mean(key: str) -> float:
        return math.fsum(r[key] for r in rows) / len(rows)

    if average == "macro":
        iou, precision, recall = mean("iou"), mean("precision"), mean("recall")
    else:
        union = retrieved + gold - inter
        iou = inter / union if union else 0.0
        precision = inter / retrieved if retrieved else 0.0
        recall = inter / gold
    metrics = {
        f"iou@{at}": iou,
        f"precision@{at}": precision,
        f"recall@{at}": recall,
        f"doc_recall@{at}": mean("doc_recall"),
        f"passage_recall@{at}": mean("passage_recall"),
        f"rrr@{at}": ref_retrieved_ratio_at(relevance, at),
        f"mrr@{at}": mrr_at(relevance, at),
    }
    return EvalReport("retrieval", metrics, rows, {"at": at, "average": average, "token": "whitespace-word"}, flags)


def evaluate_ocr(pred: Mapping[str, str], gold: Mapping[str, str]) -> EvalReport:
    missing = sorted(set(gold) - set(pred))
    flags = [f"missing prediction for {i!r}" for i in missing]
    rows = [{"id": i, "nls": nls(pred.get(i, ""), gold[i])} for i in sorted(gold)]
    if not rows:
        raise MetricError("no gold texts")
    score = math.fsum(r["nls"] for r in rows) / len(rows)
    return EvalReport("ocr", {"nls": score}, rows, {"missing_counts_as": "empty string"}, flags)


def evaluate_judge(answers: Sequence[Mapping[str, Any]], judges: Mapping[str, Gateway]) -> EvalReport:
    """Panel score per answer row (``question``, ``answer``, ``reference``, optional ``context``)."""
    rows, flags = [], []
    for a in answers:
        ps = judge_panel_score(a["question"], a["answer"], a["reference"], judges, a.get("context"))
        rid = a.get("id", len(rows))
        flags += [f"{rid}: {f}" for f in ps.flags]
        rows.append({"id": rid, "judge": ps.mean, **{f"judge:{k}": v for k, v in ps.per_judge.items()}})
    scored = [r["judge"] for r in rows if r["judge"] is not None]
    if not scored:
        raise MetricError("no answer received a parsable judge score")
    metrics = {"judge": math.fsum(scored) / len(scored)}
    for name in judges:
        vals = [r[f"judge:{name}"] for r in rows if r[f"judge:{name}"] is not None]
        if vals:
            metrics[f"judge:{name}"] = math.fsum(vals) / len(vals)
    return EvalReport("judge", metrics, rows, {"scale": "0-5 x 20", "judges": list(judges)}, flags)


def evaluate_pairwise(
    answers_a: Sequence[Mapping[str, Any]],
    answers_b: Sequence[Mapping[str, Any]],
    judges: Mapping[str, Gateway],
) -> EvalReport:
    """Win rate of system A over B, rows matched by ``id``."""
    by_id = {str(b["id"]): b for b in answers_b}
    tallies: dict[str, list[int]] = {name: [0, 0, 0] for name in judges}
    rows, flags = [], []
    for a in answers_a:
        b = by_id.get(str(a["id"]))
        if b is None:
            flags.append(f"{a['id']}: no counterpart in B")
            continue
        row = {"id": a["id"]}
        for name, gw in judges.items():
            try:
                verdict = pairwise_preference(gw, a["question"], a.get("reference", ""), a["answer"], b["answer"])
            except GatewayError as exc:
                flags.append(f"{a['id']} judge {name}: {exc}")
                row[f"verdict:{name}"] = None
                continue
            tallies[name][{"A": 0, "tie": 1, "B": 2}[verdict]] += 1
            row[f"verdict:{name}"] = verdict
        rows.append(row)
    usable = {n: t for n, t in tallies.items() if sum(t) > 0}
    metrics = {"win_rate": win_rate([tuple(t) for t in usable.values()])}
    for name, t in usable.items():
        metrics[f"win_rate:{name}"] = win_rate([tuple(t)])
    config = {"judges": list(judges), "tallies": {n: {"wins": t[0], "ties": t[1], "losses": t[2]} for n, t in tallies.items()}}
    return EvalReport("pairwise", metrics, rows, config, flags)


def generate_eval_samples(chunks: Iterable[Chunk], documents: Mapping[str, str], gateway: Gateway) -> list[dict[str, Any]]:
    """Ask the gateway for a (question, verbatim excerpt) pair per chunk.

    Excerpts are located inside the chunk's source range; pairs whose
    excerpt cannot be found verbatim are skipped.
    """
    out = []
    for ch in chunks:
        try:
            obj = loads_object(gateway.complete("eval_query_generation", text=ch.text))
        except GatewayError:
            continue
        if not obj or not obj.get("question") or not obj.get("excerpt"):
            continue
        doc = documents[ch.doc_id]
        pos = doc.find(obj["excerpt"], ch.start, ch.end)
        if pos < 0:
            continue
        out.append(
            {
                "query_id": f"q{len(out):05d}",
                "query": obj["question"],
                "gold_excerpts": [{"doc_id": ch.doc_id, "start": pos, "end": pos + len(obj["excerpt"])}],
                "source_chunk": ch.chunk_id,
            }
        )
    return out
