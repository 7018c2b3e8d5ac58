"""Binary-quantized vector index with full-precision rescoring.

Each KB is one immutable :class:`VectorIndex`. Candidate search ranks packed
sign codes by Hamming distance; rescoring re-sorts candidates by cosine (or
dot product) on the stored float embeddings.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SCHEME_ID = "sign>=0/v1"

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


class UnknownKB(KeyError):
    pass


def binarize(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Pack ``values >= 0`` into a uint8 bit array (MSB first)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("embedding must be a non-empty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("embedding contains non-finite values")
    return np.packbits(v >= 0)


def binarize_many(matrix: np.ndarray) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("expected a 2-D array of embeddings")
    if not np.all(np.isfinite(m)):
        raise ValueError("embeddings contain non-finite values")
    return np.packbits(m >= 0, axis=1)


def unpack_code(code: np.ndarray, dim: int) -> np.ndarray:
    return np.unpackbits(code)[:dim]


def hamming(code_a: np.ndarray, code_b: np.ndarray) -> int:
    return int(_POPCOUNT[np.bitwise_xor(code_a, code_b)].sum())


def hamming_many(codes: np.ndarray, query_code: np.ndarray) -> np.ndarray:
    return _POPCOUNT[np.bitwise_xor(codes, query_code[None, :])].sum(axis=1, dtype=np.int64)


# ---------------------------------------------------------------------------
# Metadata filters


def metadata_filter(metadata: Mapping[str, Any], filter_expr: Mapping[str, Any] | None) -> bool:
    """Conjunction of equality / set-membership predicates.

    A list, tuple or set value means membership; anything else means
    equality. Values compare by their string form so ``2021`` matches
    ``"2021"``. A predicate on a key the entry lacks is false.
    """
    if not filter_expr:
        return True
    for key, want in filter_expr.items():
        if key not in metadata:
            return False
        have = str(metadata[key])
        if isinstance(want, (list, tuple, set, frozenset)):
            if have not in {str(w) for w in want}:
                return False
        elif have != str(want):
            return False
    return True


def parse_filter(expr: str | None) -> dict[str, Any]:
    """Parse ``"source=kb-A;year=2020|2021"`` into a filter mapping.

    ``;`` separates predicates, ``|`` separates allowed values. A JSON object
    is accepted as well.
    """
    if not expr or not expr.strip():
        return {}
    expr = expr.strip()
    if expr.startswith("{"):
        obj = json.loads(expr)
        if not isinstance(obj, dict):
            raise ValueError("filter JSON must be an object")
        return obj
    out: dict[str, Any] = {}
    for part in expr.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ValueError(f"bad filter predicate {part!r}; expected key=value")
        key, val = (s.strip() for s in part.split("=", 1))
        out[key] = val.split("|") if "|" in val else val
    return out


# ---------------------------------------------------------------------------


@dataclass
class Candidate:
    chunk_id: str
    kb_id: str
    hamming: int
    score: float | None = None
    metadata: dict[str, Any] = field(default_factory=dict)
    text: str = ""
    row: int = -1


class VectorIndex:
    """Immutable per-KB index of embeddings and their sign codes."""

    def __init__(
        self,
        kb_id: str,
        chunk_ids: Sequence[str],
        embeddings: np.ndarray,
        metadata: Sequence[Mapping[str, Any]] | None = None,
        texts: Sequence[str] | None = None,
        codes: np.ndarray | None = None,
    ):
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2:
            emb = emb.reshape(len(chunk_ids), -1)
        if emb.shape[0] != len(chunk_ids):
            raise ValueError("one embedding per chunk id required")
        if len(set(chunk_ids)) != len(chunk_ids):
            raise ValueError("duplicate chunk ids")
        if emb.shape[0] and emb.shape[1] == 0:
            raise ValueError("embedding dim must be > 0")
        self.kb_id = kb_id
        self.chunk_ids = list(chunk_ids)
        self.embeddings = emb
        self.embeddings.setflags(write=False)
        self.dim = emb.shape[1] if emb.shape[0] else 0
        self.metadata = [dict(m) for m in (metadata or [{} for _ in chunk_ids])]
        self.texts = list(texts) if texts is not None else ["" for _ in chunk_ids]
        self.codes = binarize_many(emb) if codes is None else np.asarray(codes, dtype=np.uint8)
        self._row = {cid: i for i, cid in enumerate(self.chunk_ids)}
        # chunk-id rank used for tie-breaking
        self._id_rank = np.empty(len(self.chunk_ids), dtype=np.int64)
        self._id_rank[np.argsort(np.array(self.chunk_ids, dtype=object), kind="stable")] = np.arange(len(self.chunk_ids))

    def __len__(self) -> int:
        return len(self.chunk_ids)

    @classmethod
    def build(cls, kb_id: str, entries: Iterable[Mapping[str, Any]]) -> "VectorIndex":
        """Build from dicts with ``chunk_id``, ``vector`` and optional ``metadata``/``text``."""
        ids, vecs, metas, texts = [], [], [], []
        for e in entries:
            ids.append(str(e["chunk_id"]))
            vecs.append(np.asarray(e["vector"], dtype=np.float64))
            metas.append(dict(e.get("metadata") or {}))
            texts.append(e.get("text", ""))
        dims = {v.size for v in vecs}
        if len(dims) > 1:
            raise ValueError(f"inconsistent embedding dims: {sorted(dims)}")
        emb = np.vstack(vecs) if vecs else np.zeros((0, 0))
        return cls(kb_id, ids, emb, metas, texts)

    def entry(self, chunk_id: str) -> dict[str, Any]:
        i = self._row[chunk_id]
        return {
            "chunk_id": chunk_id,
            "kb_id": self.kb_id,
            "metadata": self.metadata[i],
            "text": self.texts[i],
        }

    def __contains__(self, chunk_id: str) -> bool:
        return chunk_id in self._row

    def hamming_topN(
        self, query_code: np.ndarray, n: int, filter_expr: Mapping[str, Any] | None = None
    ) -> list[Candidate]:
        """``n`` filtered entries nearest in Hamming distance, ties by chunk id."""
        if n < 1:
            raise ValueError("N must be >= 1")
        if not len(self):
            return []
        query_code = np.asarray(query_code, dtype=np.uint8)
        if query_code.shape != self.codes.shape[1:]:
            raise ValueError(f"query code has {query_code.size} bytes, index uses {self.codes.shape[1]}")
        rows = np.arange(len(self))
        if filter_expr:
            rows = rows[[metadata_filter(m, filter_expr) for m in self.metadata]]
        dist = hamming_many(self.codes[rows], query_code)
        order = np.lexsort((self._id_rank[rows], dist))[:n]
        return [
            Candidate(
                chunk_id=self.chunk_ids[r],
                kb_id=self.kb_id,
                hamming=int(dist[o]),
                metadata=self.metadata[r],
                text=self.texts[r],
                row=int(r),
            )
            for o, r in ((o, rows[o]) for o in order)
        ]

    def rescore(
        self, query_embedding: Sequence[float], candidates: Sequence[Candidate], metric: str = "cosine"
    ) -> tuple[list[Candidate], list[str]]:
        """Attach full-precision scores and sort descending (ties by chunk id)."""
        warnings: list[str] = []
        q = np.asarray(query_embedding, dtype=np.float64)
        if not candidates:
            return [], warnings
        rows = np.array([c.row if c.row >= 0 else self._row[c.chunk_id] for c in candidates])
        scores = similarity(q, self.embeddings[rows], metric, warnings)
        scored = [
            Candidate(c.chunk_id, c.kb_id, c.hamming, float(s), c.metadata, c.text, int(r))
            for c, s, r in zip(candidates, scores, rows)
        ]
        scored.sort(key=lambda c: (-c.score, c.chunk_id))
        return scored, warnings

    def search(
        self,
        query_embedding: Sequence[float],
        n: int,
        filter_expr: Mapping[str, Any] | None = None,
        metric: str = "cosine",
    ) -> tuple[list[Candidate], list[str]]:
        cands = self.hamming_topN(binarize(query_embedding), n, filter_expr)
        return self.rescore(query_embedding, cands, metric)

    # -- persistence ---------------------------------------------------------

    def save(self, directory: str | os.PathLike) -> Path:
        """Write ``<kb>.idx.npz`` plus a ``<kb>.meta.jsonl`` sidecar, atomically."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        header = {
            "format_version": FORMAT_VERSION,
            "scheme": SCHEME_ID,
            "kb_id": self.kb_id,
            "dim": self.dim,
            "count": len(self),
        }
        target = d / f"{self.kb_id}.idx.npz"
        fd, tmp = tempfile.mkstemp(dir=d, suffix=".npz")
        os.close(fd)
        np.savez(tmp, header=np.array(json.dumps(header)), codes=self.codes, embeddings=self.embeddings)
        meta_tmp = d / f".{self.kb_id}.meta.jsonl.tmp"
        with open(meta_tmp, "w", encoding="utf-8") as fh:
            for cid, m, t in zip(self.chunk_ids, self.metadata, self.texts):
                fh.write(json.dumps({"chunk_id": cid, "metadata": m, "text": t}, ensure_ascii=False) + "\n")
        os.replace(meta_tmp, d / f"{self.kb_id}.meta.jsonl")
        os.replace(tmp, target)
        return target

    @classmethod
    def load(cls, directory: str | os.PathLike, kb_id: str) -> "VectorIndex":
        d = Path(directory)
        path = d / f"{kb_id}.idx.npz"
        if not path.exists():
            raise UnknownKB(kb_id)
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            codes = z["codes"]
            emb = z["embeddings"]
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported index format {header.get('format_version')}")
        if header.get("scheme") != SCHEME_ID:
            raise ValueError(f"{path}: unsupported quantization scheme {header.get('scheme')}")
        ids, metas, texts = [], [], []
        with open(d / f"{kb_id}.meta.jsonl", encoding="utf-8") as fh:
            for line in fh:
                row = json.loads(line)
                ids.append(row["chunk_id"])
                metas.append(row.get("metadata") or {})
                texts.append(row.get("text", ""))
        if len(ids) != header["count"]:
            raise ValueError(f"{path}: sidecar has {len(ids)} rows, header says {header['count']}")
        return cls(header["kb_id"], ids, emb, metas, texts, codes=codes)


def similarity(q: np.ndarray, m: np.ndarray, metric: str = "cosine", warnings: list[str] | None = None) -> np.ndarray:
    """Cosine or dot-product scores of ``q`` against each row of ``m``.

    A zero-norm vector scores 0 under cosine and adds a warning.
    """
    if metric == "dot":
        return m @ q
    if metric != "cosine":
        raise ValueError(f"unknown similarity metric {metric!r}")
    qn = np.linalg.norm(q)
    mn = np.linalg.norm(m, axis=1)
    denom = qn * mn
    zero = denom == 0
    if zero.any() and warnings is not None:
        warnings.append(f"zero-norm vector in rescoring ({int(zero.sum())} candidate(s) scored 0)")
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(zero, 0.0, (m @ q) / np.where(zero, 1.0, denom))
    return out


class IndexRegistry:
    """Loads and caches per-KB indexes from a directory or explicit per-KB paths."""

    def __init__(
        self,
        directory: str | os.PathLike | None = None,
        indexes: Mapping[str, VectorIndex] | None = None,
        paths: Mapping[str, str | os.PathLike] | None = None,
    ):
        self.directory = Path(directory) if directory else None
        self.paths = {k: Path(v) for k, v in (paths or {}).items()}
        self._cache: dict[str, VectorIndex] = dict(indexes or {})
        self._lock = threading.Lock()

    def get(self, kb_id: str) -> VectorIndex:
        with self._lock:
            if kb_id not in self._cache:
                where = self.paths.get(kb_id, self.directory)
                if where is None:
                    raise UnknownKB(kb_id)
                self._cache[kb_id] = VectorIndex.load(where, kb_id)
            return self._cache[kb_id]

    def add(self, index: VectorIndex) -> None:
        self._cache[index.kb_id] = index

    def kb_ids(self) -> list[str]:
        ids = set(self._cache) | set(self.paths)
        if self.directory and self.directory.exists():
            ids.update(p.name[: -len(".idx.npz")] for p in self.directory.glob("*.idx.npz"))
        return sorted(ids)
