from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from groundrag.chunker import ChunkConfig, chunk_document  # noqa: E402
from groundrag.gateway import Gateway, MockStack  # noqa: E402
from groundrag.index import IndexRegistry, VectorIndex  # noqa: E402

# "PASS/FAIL criterion ..." lines, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []

TOPICS = {
    "ocean": "sea surface temperature ocean colour chlorophyll altimetry salinity currents waves",
    "land": "vegetation index soil moisture crop yield land cover forest biomass drought",
    "atmos": "aerosol optical depth cloud mask water vapour ozone methane radiance",
    "radar": "synthetic aperture radar backscatter interferometry polarisation speckle subsidence",
}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def record_criterion():
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def topic_documents(n_per_topic: int = 3, seed: int = 0) -> dict[str, str]:
    """Small deterministic corpus: paragraphs of topic words plus filler."""
    rng = np.random.default_rng(seed)
    filler = "the of and in measured using data from observations results show".split()
    docs = {}
    for topic, vocab in TOPICS.items():
        words = vocab.split()
        for i in range(n_per_topic):
            paras = []
            for _ in range(4):
                n = int(rng.integers(40, 90))
                toks = [str(rng.choice(words if rng.random() < 0.6 else filler)) for _ in range(n)]
                paras.append(" ".join(toks) + ".")
            docs[f"{topic}-{i}"] = f"# {topic.title()} study {i}\n\n" + "\n\n".join(paras)
    return docs


@pytest.fixture
def mock_stack() -> MockStack:
    return MockStack()


@pytest.fixture
def gateway(mock_stack) -> Gateway:
    return Gateway(mock_stack.transports(), sleep=lambda s: None)


@pytest.fixture
def documents() -> dict[str, str]:
    return topic_documents()


def build_topic_index(gateway: Gateway, documents: dict[str, str], kb: str = "eo", target_words: int = 60) -> VectorIndex:
    cfg = ChunkConfig.for_target(target_words)
    entries = []
    for doc_id, text in documents.items():
        chunks = chunk_document(doc_id, text, cfg, {"topic": doc_id.split("-")[0]})
        vecs = gateway.embed([c.text for c in chunks])
        for c, v in zip(chunks, vecs):
            entries.append({"chunk_id": c.chunk_id, "vector": v, "text": c.text, "metadata": {**c.metadata, "doc_id": c.doc_id}})
    return VectorIndex.build(kb, entries)


@pytest.fixture
def registry(gateway, documents) -> IndexRegistry:
    index = build_topic_index(gateway, documents)
    gateway.calls.clear()
    return IndexRegistry(indexes={index.kb_id: index})


@pytest.fixture
def index_dir(tmp_path, gateway, documents) -> Path:
    build_topic_index(gateway, documents).save(tmp_path / "idx")
    gateway.calls.clear()
    return tmp_path / "idx"


def write_jsonl(path: Path, rows) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path
