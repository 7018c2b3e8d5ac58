"""``groundrag`` command line.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .chunker import Chunk, ChunkConfig, chunk_document, filter_uninformative
from .config import AppConfig, ConfigError
from .conversation import ConversationManager, replay
from .corpus import CleanDocument, RawDocument, clean_corpus, read_jsonl, write_jsonl
from .evaluation import evaluate_judge, evaluate_ocr, evaluate_pairwise, evaluate_retrieval, generate_eval_samples
from .gateway import Gateway, GatewayConfig, GatewayError, HTTPTransport, LexicalJudge, build_gateway
from .hallucination import HallucinationPipeline
from .index import IndexRegistry, UnknownKB, VectorIndex, parse_filter
from .metrics import MetricError, RetrievalEvalSample
from .report import write_report
from .retrieval import RetrievalConfig, Retriever

log = logging.getLogger("groundrag")

EMBED_BATCH = 64


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _load_config(args: argparse.Namespace) -> AppConfig:
    return AppConfig.load(args.config) if args.config else AppConfig()


def _gateway(cfg: AppConfig) -> Gateway:
    return build_gateway(cfg.gateway)


def _registry(args: argparse.Namespace, cfg: AppConfig) -> IndexRegistry:
    return IndexRegistry(directory=getattr(args, "index_dir", None) or "indexes", paths=cfg.kbs)


def _kbs(value: str | None, cfg: AppConfig, registry: IndexRegistry) -> list[str]:
    if value:
        return [k.strip() for k in value.split(",") if k.strip()]
    return list(cfg.retrieval.kbs) or registry.kb_ids()


def _retrieval_config(args: argparse.Namespace, cfg: AppConfig, registry: IndexRegistry) -> RetrievalConfig:
    base = cfg.retrieval
    flt = parse_filter(args.filter) if getattr(args, "filter", None) else base.filter
    k = getattr(args, "k", None) or base.k
    return RetrievalConfig(k, base.candidate_multiplier, _kbs(getattr(args, "kbs", None), cfg, registry), flt, base.metric, base.rerank_scope)


def _emit(obj: Any, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _judges(spec: str, cfg: AppConfig) -> dict[str, Gateway]:
    """``mock:a,mock:b=4,http:gpt=https://host/v1/chat`` -> named judge gateways.

    ``mock:<name>`` scores by word overlap with the reference;
    ``mock:<name>=<n>`` always answers ``n``.
    """
    judges: dict[str, Gateway] = {}
    for item in (s.strip() for s in spec.split(",")):
        if not item:
            continue
        kind, _, rest = item.partition(":")
        name, _, value = rest.partition("=")
        if not name or name in judges:
            raise UsageError(f"bad or duplicate judge spec {item!r}")
        gcfg = GatewayConfig(timeout=cfg.gateway.timeout, retry=cfg.gateway.retry, prompt_dir=cfg.gateway.prompt_dir)
        if kind == "mock":
            transport = LexicalJudge(int(value) if value else None)
        elif kind == "http" and value:
            transport = HTTPTransport({"judge": value}, cfg.gateway.timeout)
        else:
            raise UsageError(f"judge spec {item!r}: expected mock:<name>[=<score>] or http:<name>=<url>")
        judges[name] = Gateway({"judge": transport}, gcfg)
    if not judges:
        raise UsageError("no judges given")
    return judges


def _documents(path: str) -> dict[str, str]:
    return {str(r["id"]): r["text"] for r in read_jsonl(path)}


# ---------------------------------------------------------------------------
# commands


def cmd_clean(args: argparse.Namespace, cfg: AppConfig) -> int:
    docs = [RawDocument.from_dict(r) for r in read_jsonl(args.inp)]
    near = {"threshold": args.threshold} if args.threshold is not None else None
    cleaned, report = clean_corpus(docs, cfg.cleaning, near)
    n = write_jsonl(args.out, (d.to_dict() for d in cleaned))
    if args.report:
        _emit({"v": 1, **report.to_dict()}, args.report)
    log.info("cleaned %d of %d documents", n, len(docs))
    return 0


def cmd_chunk(args: argparse.Namespace, cfg: AppConfig) -> int:
    config = ChunkConfig.for_target(args.target_words) if args.target_words else cfg.chunk
    rows, dropped = [], 0
    for r in read_jsonl(args.inp):
        doc = CleanDocument.from_dict(r)
        chunks = chunk_document(doc.id, doc.text, config, doc.metadata)
        if not args.keep_all:
            chunks, gone = filter_uninformative(chunks, config)
            dropped += len(gone)
            for ch, reason in gone:
                log.debug("dropped %s: %s", ch.chunk_id, reason)
        for ch in chunks:
            for w in ch.warnings:
                log.warning("%s: %s", ch.chunk_id, w)
        rows.extend(ch.to_dict() for ch in chunks)
    write_jsonl(args.out, rows)
    log.info("wrote %d chunks (%d dropped as uninformative)", len(rows), dropped)
    return 0


def cmd_index_build(args: argparse.Namespace, cfg: AppConfig) -> int:
    chunks = [Chunk.from_dict(r) for r in read_jsonl(args.chunks)]
    if args.embeddings:
        vecs = {str(r["chunk_id"]): r["vector"] for r in read_jsonl(args.embeddings)}
        missing = [c.chunk_id for c in chunks if c.chunk_id not in vecs]
        if missing:
            raise ValueError(f"{args.embeddings}: no vector for {len(missing)} chunk(s), e.g. {missing[0]!r}")
        vectors = [vecs[c.chunk_id] for c in chunks]
    else:
        gw = _gateway(cfg)
        vectors = []
        for i in range(0, len(chunks), EMBED_BATCH):
            vectors.extend(gw.embed([c.text for c in chunks[i : i + EMBED_BATCH]]))
    entries = (
        {
            "chunk_id": c.chunk_id,
            "vector": v,
            "text": c.text,
            "metadata": {**c.metadata, "doc_id": c.doc_id, "section": " / ".join(c.section_path), "start": c.start, "end": c.end},
        }
        for c, v in zip(chunks, vectors)
    )
    path = VectorIndex.build(args.kb, entries).save(args.out)
    log.info("wrote %s (%d entries)", path, len(chunks))
    return 0


def _read_vector(path: str) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8").strip()
    obj = json.loads(text.splitlines()[0] if text.startswith("{") else text)
    vec = obj["vector"] if isinstance(obj, dict) else obj
    return np.asarray(vec, dtype=np.float64)


def cmd_index_query(args: argparse.Namespace, cfg: AppConfig) -> int:
    index = _registry(args, cfg).get(args.kb)
    q = _read_vector(args.embedding_file)
    cands, warnings = index.search(q, args.n, parse_filter(args.filter) if args.filter else None, args.metric)
    rows = [{"chunk_id": c.chunk_id, "kb_id": c.kb_id, "hamming": c.hamming, "score": c.score, "metadata": c.metadata} for c in cands]
    _emit({"v": 1, "kb_id": args.kb, "n": args.n, "candidates": rows, "warnings": warnings}, args.out)
    return 0


def cmd_query(args: argparse.Namespace, cfg: AppConfig) -> int:
    registry = _registry(args, cfg)
    rcfg = _retrieval_config(args, cfg, registry)
    result = Retriever(_gateway(cfg), registry).run(args.q, rcfg, rewrite=not args.no_rewrite)
    _emit(result.to_dict(), args.out)
    return 0


def _service(args: argparse.Namespace, cfg: AppConfig, clock: str | None = None):
    from .service import AnswerService

    registry = _registry(args, cfg)
    rcfg = _retrieval_config(args, cfg, registry)
    return AnswerService(
        _gateway(cfg),
        registry,
        rcfg,
        cfg.budget,
        clock=clock or cfg.service.clock,
        max_sessions=cfg.service.max_sessions,
        hallucination_check=cfg.service.hallucination_check and not getattr(args, "no_check", False),
    )


def cmd_answer(args: argparse.Namespace, cfg: AppConfig) -> int:
    service = _service(args, cfg, args.clock)
    _emit(service.answer({"query": args.q, "session_id": args.session}).to_dict(), args.out)
    return 0


def cmd_halluc_check(args: argparse.Namespace, cfg: AppConfig) -> int:
    gw = _gateway(cfg)
    registry = _registry(args, cfg)
    rcfg = _retrieval_config(args, cfg, registry)
    for kb in rcfg.kbs:
        registry.get(kb)
    evidence = [r["text"] for r in read_jsonl(args.evidence)] if args.evidence else []
    trace = HallucinationPipeline(gw, Retriever(gw, registry), rcfg).run(args.question, args.answer, evidence)
    _emit(trace.to_dict(), args.out)
    return 0


def cmd_replay(args: argparse.Namespace, cfg: AppConfig) -> int:
    manager = ConversationManager(_gateway(cfg), cfg.budget)
    traces = replay(read_jsonl(args.script), manager)
    if args.out:
        write_jsonl(args.out, traces)
    else:
        for t in traces:
            sys.stdout.write(json.dumps(t, ensure_ascii=False) + "\n")
    return 0


def _finish_report(report, args: argparse.Namespace) -> int:
    written = write_report(report, args.out, args.csv, figure=not args.no_figure)
    for kind, path in written.items():
        log.info("wrote %s %s", kind, path)
    for flag in report.flags:
        log.warning("%s", flag)
    return 0


def cmd_eval_retrieval(args: argparse.Namespace, cfg: AppConfig) -> int:
    samples = {str(r.get("query_id", r.get("id"))): r for r in read_jsonl(args.samples)}
    runs = {str(r.get("query_id", r.get("id"))): r for r in read_jsonl(args.runs)}
    merged = []
    for qid, s in samples.items():
        run = runs.get(qid, {})
        merged.append(RetrievalEvalSample.from_dict({**s, "query_id": qid, "retrieved_chunks": run.get("retrieved_chunks", run.get("retrieved", []))}))
    report = evaluate_retrieval(merged, _documents(args.docs), args.at, args.average)
    return _finish_report(report, args)


def cmd_eval_ocr(args: argparse.Namespace, cfg: AppConfig) -> int:
    return _finish_report(evaluate_ocr(_documents(args.pred), _documents(args.gold)), args)


def cmd_eval_judge(args: argparse.Namespace, cfg: AppConfig) -> int:
    answers = list(read_jsonl(args.answers))
    return _finish_report(evaluate_judge(answers, _judges(args.judges, cfg)), args)


def cmd_eval_pairwise(args: argparse.Namespace, cfg: AppConfig) -> int:
    a, b = list(read_jsonl(args.a)), list(read_jsonl(args.b))
    return _finish_report(evaluate_pairwise(a, b, _judges(args.judges, cfg)), args)


def cmd_eval_generate(args: argparse.Namespace, cfg: AppConfig) -> int:
    chunks = [Chunk.from_dict(r) for r in read_jsonl(args.chunks)]
    docs = {}
    for r in read_jsonl(args.docs):
        docs[str(r["id"])] = r["text"]
    rows = generate_eval_samples(chunks[: args.limit] if args.limit else chunks, docs, _gateway(cfg))
    write_jsonl(args.out, rows)
    log.info("generated %d eval samples from %d chunks", len(rows), len(chunks))
    return 0


def cmd_serve(args: argparse.Namespace, cfg: AppConfig) -> int:
    from .service import make_server

    service = _service(args, cfg, args.clock)
    host = args.host or cfg.service.host
    port = cfg.service.port if args.port is None else args.port
    server = make_server(service, host, port)
    log.info("serving on http://%s:%d (KBs: %s)", *server.server_address[:2], ", ".join(service.retrieval.kbs) or "none")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")

    p = argparse.ArgumentParser(prog="groundrag", description="Grounded retrieval-augmented QA toolkit.", parents=[common])
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name: str, func, help: str, parent=sub) -> argparse.ArgumentParser:
        sp = parent.add_parser(name, help=help, description=help, parents=[common])
        sp.set_defaults(func=func)
        return sp

    def index_dir(sp):
        sp.add_argument("--index-dir", default=None, help="directory of <kb>.idx.npz files (default: indexes/)")

    sp = add("clean", cmd_clean, "Clean, anonymize and de-duplicate a JSON-lines corpus.")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report", help="dedup report JSON")
    sp.add_argument("--threshold", type=float, help="near-duplicate Jaccard threshold (default 0.8)")

    sp = add("chunk", cmd_chunk, "Split cleaned documents into chunks.")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--target-words", type=int)
    sp.add_argument("--keep-all", action="store_true", help="do not drop uninformative chunks")

    ip = add("index", None, "Build or query a vector index.")
    isub = ip.add_subparsers(dest="index_command", metavar="ACTION")
    isub.required = True
    sp = add("build", cmd_index_build, "Embed chunks and write a KB index.", isub)
    sp.add_argument("--chunks", required=True)
    sp.add_argument("--kb", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--embeddings", help="precomputed JSON-lines of {chunk_id, vector}")
    sp = add("query", cmd_index_query, "Hamming top-N search plus rescoring for one vector.", isub)
    sp.add_argument("--kb", required=True)
    index_dir(sp)
    sp.add_argument("--embedding-file", required=True, help="JSON vector or {vector: [...]}")
    sp.add_argument("--n", type=int, default=20)
    sp.add_argument("--filter")
    sp.add_argument("--metric", choices=("cosine", "dot"), default="cosine")
    sp.add_argument("--out")

    sp = add("query", cmd_query, "Rewrite, retrieve and rerank for a query.")
    sp.add_argument("--q", required=True)
    sp.add_argument("--kbs")
    sp.add_argument("--k", type=int)
    sp.add_argument("--filter")
    sp.add_argument("--no-rewrite", action="store_true")
    index_dir(sp)
    sp.add_argument("--out")

    sp = add("answer", cmd_answer, "Answer one question with the full pipeline.")
    sp.add_argument("--q", required=True)
    sp.add_argument("--kbs")
    sp.add_argument("--k", type=int)
    sp.add_argument("--filter")
    sp.add_argument("--session", default="cli")
    sp.add_argument("--no-check", action="store_true", help="skip the hallucination check")
    sp.add_argument("--clock", choices=("real", "logical"))
    index_dir(sp)
    sp.add_argument("--out")

    sp = add("halluc-check", cmd_halluc_check, "Check an answer and revise it if flagged.")
    sp.add_argument("--question", required=True)
    sp.add_argument("--answer", required=True)
    sp.add_argument("--kbs")
    sp.add_argument("--k", type=int)
    sp.add_argument("--evidence", help="JSON-lines of {text} passages the answer was based on")
    index_dir(sp)
    sp.add_argument("--out")

    sp = add("replay", cmd_replay, "Replay a scripted conversation and emit per-turn prompt traces.")
    sp.add_argument("--script", required=True)
    sp.add_argument("--out")

    ep = add("eval", None, "Evaluation reports (JSON + CSV + PNG).")
    esub = ep.add_subparsers(dest="eval_command", metavar="KIND")
    esub.required = True

    def report_args(sp, default_out: str):
        sp.add_argument("--out", default=default_out, help=f"report JSON (default {default_out})")
        sp.add_argument("--csv", help="per-sample CSV (default: next to --out)")
        sp.add_argument("--no-figure", action="store_true")

    sp = add("retrieval", cmd_eval_retrieval, "Token-level and rank metrics for retrieval runs.", esub)
    sp.add_argument("--samples", required=True, help="JSON-lines {query_id, query, gold_excerpts}")
    sp.add_argument("--runs", required=True, help="JSON-lines {query_id, retrieved_chunks}")
    sp.add_argument("--docs", required=True, help="JSON-lines {id, text} the ranges refer to")
    sp.add_argument("--at", type=int, default=10)
    sp.add_argument("--average", choices=("macro", "micro"), default="macro")
    report_args(sp, "retrieval_report.json")
    sp = add("ocr", cmd_eval_ocr, "Normalized Levenshtein similarity of OCR output.", esub)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gold", required=True)
    report_args(sp, "ocr_report.json")
    sp = add("judge", cmd_eval_judge, "Judge-panel scores for answers.", esub)
    sp.add_argument("--answers", required=True)
    sp.add_argument("--judges", default="mock:a")
    report_args(sp, "judge_report.json")
    sp = add("pairwise", cmd_eval_pairwise, "Pairwise win rate of system A over B.", esub)
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--judges", default="mock:a")
    report_args(sp, "pairwise_report.json")
    sp = add("generate", cmd_eval_generate, "Generate (query, gold excerpt) samples from chunks.", esub)
    sp.add_argument("--chunks", required=True)
    sp.add_argument("--docs", required=True, help="clean or raw JSON-lines the chunks came from")
    sp.add_argument("--limit", type=int)
    sp.add_argument("--out", required=True)

    sp = add("serve", cmd_serve, "Run the JSON-over-HTTP service.")
    sp.add_argument("--host")
    sp.add_argument("--port", type=int)
    sp.add_argument("--kbs")
    sp.add_argument("--k", type=int)
    sp.add_argument("--clock", choices=("real", "logical"))
    index_dir(sp)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        print(f"groundrag: config error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=(args.log_level or cfg.log_level).upper(), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"groundrag: {exc}", file=sys.stderr)
        return 2
    except UnknownKB as exc:
        print(f"groundrag: unknown KB {exc.args[0]!r}", file=sys.stderr)
        return 1
    except (GatewayError, MetricError, ValueError, KeyError, OSError) as exc:
        print(f"groundrag: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
