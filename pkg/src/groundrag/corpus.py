"""Corpus cleaning, anonymization and de-duplication.

Raw extracted documents go through four fixed cleaning passes (artifact tags,
merged numeric prefixes, OCR adjacency duplicates, low-information lines and
newline runs), then email anonymization. Exact duplicates are grouped by a
SHA-256 digest of the text bytes; near-duplicate paragraphs are surfaced with
MinHash signatures and LSH banding.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

FORMAT_HINTS = ("html-extracted", "pdf-extracted", "plain")

DEFAULT_TAG_PATTERNS = (r"<WARNING>", r"<ERROR>", r"<[A-Z][A-Z0-9_]+>")
EMAIL_PATTERN = re.compile(r"[A-Za-z0-9._%+\-]+@[A-Za-z0-9\-]+(?:\.[A-Za-z0-9\-]+)*\.[A-Za-z]+")
EMAIL_TOKEN = "[EMAIL]"

_MERGED_PREFIX = re.compile(r"\b(\d+)(?=[A-Z][a-z])")
_NEWLINE_RUN = re.compile(r"\n{3,}")

# Upper bound on fixpoint iterations of a single pass.
_MAX_ROUNDS = 64


@dataclass
class RawDocument:
    id: str
    text: str
    source: str = ""
    format_hint: str = "plain"
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("document id must be non-empty")
        if not isinstance(self.text, str):
            raise TypeError(f"document {self.id}: text must be str")
        if self.format_hint not in FORMAT_HINTS:
            raise ValueError(f"document {self.id}: unknown format_hint {self.format_hint!r}")

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "RawDocument":
        return cls(
            id=str(obj["id"]),
            text=obj["text"],
            source=obj.get("source", ""),
            format_hint=obj.get("format_hint", "plain"),
            metadata=dict(obj.get("metadata") or {}),
        )


@dataclass
class CleanDocument:
    id: str
    text: str
    metadata: dict[str, Any] = field(default_factory=dict)
    source: str = ""
    cleaning_log: list[tuple[str, int]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["cleaning_log"] = [{"pass": name, "edits": n} for name, n in self.cleaning_log]
        return d

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "CleanDocument":
        log = [(e["pass"], int(e["edits"])) for e in obj.get("cleaning_log", [])]
        return cls(
            id=str(obj["id"]),
            text=obj["text"],
            metadata=dict(obj.get("metadata") or {}),
            source=obj.get("source", ""),
            cleaning_log=log,
        )


@dataclass
class NearDuplicatePair:
    a: tuple[str, int]
    b: tuple[str, int]
    jaccard: float


@dataclass
class DedupReport:
    algorithm: str = "sha256"
    exact_duplicate_groups: list[list[str]] = field(default_factory=list)
    kept: list[str] = field(default_factory=list)
    near_duplicate_pairs: list[NearDuplicatePair] = field(default_factory=list)
    minhash: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "algorithm": self.algorithm,
            "exact_duplicate_groups": self.exact_duplicate_groups,
            "kept": self.kept,
            "near_duplicate_pairs": [
                {"a": list(p.a), "b": list(p.b), "jaccard": p.jaccard}
                for p in self.near_duplicate_pairs
            ],
            "minhash": self.minhash,
        }


@dataclass
class CleaningConfig:
    tag_patterns: Sequence[str] = DEFAULT_TAG_PATTERNS
    ocr_min_span: int = 8
    ocr_max_gap: int = 2
    ocr_max_span: int = 256
    symbol_line_min_length: int = 5
    symbol_line_ratio: float = 0.8
    anonymize_emails: bool = True

    def __post_init__(self) -> None:
        if self.ocr_min_span < 1 or self.ocr_max_span < self.ocr_min_span:
            raise ValueError("need 1 <= ocr_min_span <= ocr_max_span")
        if self.ocr_max_gap < 0:
            raise ValueError("ocr_max_gap must be >= 0")
        if not 0.0 < self.symbol_line_ratio <= 1.0:
            raise ValueError("symbol_line_ratio must be in (0, 1]")

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "CleaningConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown cleaning config keys: {sorted(unknown)}")
        return cls(**obj)


def _fixpoint(fn, text: str) -> tuple[str, int]:
    """Apply ``fn`` (returning ``(text, edits)``) until nothing changes."""
    total = 0
    for _ in range(_MAX_ROUNDS):
        text, n = fn(text)
        if n == 0:
            break
        total += n
    return text, total


def remove_extraction_artifacts(text: str, patterns: Sequence[str] = DEFAULT_TAG_PATTERNS) -> tuple[str, int]:
    """Delete residual parser tags such as ``<WARNING>``; other bytes are untouched."""
    rx = re.compile("|".join(f"(?:{p})" for p in patterns))
    return _fixpoint(lambda t: rx.subn("", t), text)


def correct_merged_words(text: str) -> tuple[str, int]:
    """Insert a space between a numeric prefix and a capitalised word (``1Introduction``)."""
    return _MERGED_PREFIX.subn(r"\1 ", text)


def _first_adjacent_repeat(text: str, min_span: int, max_gap: int, max_span: int) -> tuple[int, int, int] | None:
    """Earliest ``(start, span_len, gap)`` with text[s:s+L] == text[s+L+g:s+2L+g].

    Among matches at the earliest start the shortest period (span + gap)
    wins, then the shortest gap.
    """
    n = len(text)
    if n < 2 * min_span:
        return None
    arr = np.frombuffer(text.encode("utf-32-le"), dtype=np.uint32)
    best: tuple[int, int, int] | None = None  # (start, shift, gap)
    for shift in range(min_span, min(max_span + max_gap, n - min_span) + 1):
        need = max(min_span, shift - max_gap)
        eq = arr[:-shift] == arr[shift:]
        if eq.size < need:
            continue
        cs = np.concatenate(([0], np.cumsum(eq, dtype=np.int64)))
        windows = cs[need:] - cs[:-need]
        hits = np.flatnonzero(windows == need)
        if hits.size == 0:
            continue
        start = int(hits[0])
        if best is not None and start > best[0]:
            continue
        run = need
        while start + run < eq.size and eq[start + run] and run < shift:
            run += 1
        for gap in range(max_gap + 1):
            span = shift - gap
            if span < min_span or span > max_span or run < span:
                continue
            cand = (start, shift, gap)
            if best is None or cand < best:
                best = cand
            break
    if best is None:
        return None
    start, shift, gap = best
    return start, shift - gap, gap


def remove_ocr_duplication(
    text: str, min_span: int = 8, max_gap: int = 2, max_span: int = 256
) -> tuple[str, list[str]]:
    """Collapse adjacent repeated spans (``"the sensor the sensor"``) to one copy.

    Returns the cleaned text and the removed substrings (gap plus repeat).
    """
    removed: list[str] = []
    for _ in range(len(text) + 1):
        hit = _first_adjacent_repeat(text, min_span, max_gap, max_span)
        if hit is None:
            break
        start, span, gap = hit
        cut_from = start + span
        cut_to = start + 2 * span + gap
        removed.append(text[cut_from:cut_to])
        text = text[:cut_from] + text[cut_to:]
    return text, removed


def _is_low_information(line: str, min_length: int, ratio: float) -> bool:
    chars = [c for c in line if not c.isspace()]
    if len(chars) < min_length:
        return False
    # Markdown table rows are structure, not noise.
    if chars[0] == "|":
        return False
    counts: dict[str, int] = defaultdict(int)
    for c in chars:
        counts[c] += 1
    symbol, count = max(counts.items(), key=lambda kv: (kv[1], kv[0]))
    return not symbol.isalnum() and count / len(chars) >= ratio


def rule_based_filter(text: str, min_length: int = 5, ratio: float = 0.8) -> tuple[str, int]:
    """Drop repeated-symbol lines and collapse 3+ newlines to exactly two."""

    def once(t: str) -> tuple[str, int]:
        lines = t.split("\n")
        kept = [ln for ln in lines if not _is_low_information(ln, min_length, ratio)]
        t2 = "\n".join(kept)
        t2, collapsed = _NEWLINE_RUN.subn("\n\n", t2)
        return t2, (len(lines) - len(kept)) + collapsed

    return _fixpoint(once, text)


def anonymize_emails(text: str) -> tuple[str, int]:
    return _fixpoint(lambda t: EMAIL_PATTERN.subn(EMAIL_TOKEN, t), text)


def _count_removed(result: tuple[str, list[str]]) -> tuple[str, int]:
    return result[0], len(result[1])


def clean_document(doc: RawDocument, config: CleaningConfig | None = None) -> CleanDocument:
    """Run the cleaning passes in their fixed order and log edit counts."""
    cfg = config or CleaningConfig()
    text = doc.text
    log: list[tuple[str, int]] = []

    passes: list[tuple[str, Any]] = [
        ("remove_extraction_artifacts", lambda t: remove_extraction_artifacts(t, cfg.tag_patterns)),
        ("correct_merged_words", lambda t: _fixpoint(correct_merged_words, t)),
        ("remove_ocr_duplication", lambda t: _count_removed(remove_ocr_duplication(t, cfg.ocr_min_span, cfg.ocr_max_gap, cfg.ocr_max_span))),
        ("rule_based_filter", lambda t: rule_based_filter(t, cfg.symbol_line_min_length, cfg.symbol_line_ratio)),
    ]
    if cfg.anonymize_emails:
        passes.append(("anonymize_emails", anonymize_emails))

    for name, fn in passes:
        text, n = fn(text)
        log.append((name, n))

    # A later pass can expose a pattern for an earlier one (a line removal
    # joining two tag halves, "[EMAIL]2Methods" after anonymization), so the
    # whole chain is re-run until the text is stable.
    for _ in range(_MAX_ROUNDS):
        before, edits = text, 0
        for _, fn in passes:
            text, n = fn(text)
            edits += n
        if text == before:
            break
        log.append(("final_sweep", edits))

    return CleanDocument(id=doc.id, text=text, metadata=dict(doc.metadata), source=doc.source, cleaning_log=log)


# ---------------------------------------------------------------------------
# De-duplication


def content_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def exact_dedup(docs: Iterable[RawDocument | CleanDocument]) -> DedupReport:
    """Group documents whose text bytes are identical.

    Only groups with two or more members are reported; the first document
    (input order) of every digest is kept.
    """
    groups: dict[str, list[str]] = {}
    for doc in docs:
        groups.setdefault(content_digest(doc.text), []).append(doc.id)
    return DedupReport(
        algorithm="sha256",
        exact_duplicate_groups=[ids for ids in groups.values() if len(ids) > 1],
        kept=[ids[0] for ids in groups.values()],
    )


_MERSENNE = np.uint64((1 << 61) - 1)


def word_shingles(text: str, size: int = 3) -> set[str]:
    words = text.lower().split()
    if not words:
        return set()
    if len(words) < size:
        return {" ".join(words)}
    return {" ".join(words[i : i + size]) for i in range(len(words) - size + 1)}


def _hash32(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=4).digest(), "little")


def _mulmod_mersenne(a_hi: np.ndarray, a_lo: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``(a_hi * 2**30 + a_lo) * x mod (2**61 - 1)`` without overflowing uint64.

    ``a_hi < 2**31``, ``a_lo < 2**30`` and ``x < 2**32``, so each partial
    product fits in 63 bits. Multiplying a residue by ``2**30`` is a 61-bit
    rotation because ``2**61 = 1 (mod p)``.
    """
    hi = (a_hi * x) % _MERSENNE
    hi = ((hi << np.uint64(30)) & _MERSENNE) | (hi >> np.uint64(31))
    return (hi + (a_lo * x) % _MERSENNE) % _MERSENNE


class MinHasher:
    """MinHash signatures from the universal family ``(a*x + b) mod (2**61 - 1)``.

    ``a`` and ``b`` are drawn uniformly from the field and ``x`` is a 32-bit
    token hash; the product is reduced exactly (see ``_mulmod_mersenne``).
    """

    def __init__(self, num_perms: int = 256, seed: int = 1):
        if num_perms < 1:
            raise ValueError("num_perms must be >= 1")
        self.num_perms = num_perms
        self.seed = seed
        rng = np.random.default_rng(seed)
        p = int(_MERSENNE)
        self._a = rng.integers(1, p, size=num_perms, dtype=np.uint64)
        self._b = rng.integers(0, p, size=num_perms, dtype=np.uint64)
        self._a_hi = self._a >> np.uint64(30)
        self._a_lo = self._a & np.uint64((1 << 30) - 1)

    def permute(self, hashes: np.ndarray) -> np.ndarray:
        """Matrix of ``(a_k * x_i + b_k) mod p`` for token hashes ``x_i`` (rows)."""
        x = np.asarray(hashes, dtype=np.uint64)[:, None]
        ax = _mulmod_mersenne(self._a_hi[None, :], self._a_lo[None, :], x)
        return (ax + self._b[None, :]) % _MERSENNE

    def signature(self, shingles: Iterable[str]) -> np.ndarray:
        hv = np.fromiter((_hash32(s) for s in shingles), dtype=np.uint64)
        if hv.size == 0:
            return np.full(self.num_perms, _MERSENNE, dtype=np.uint64)
        return self.permute(hv).min(axis=0)

    @staticmethod
    def jaccard(sig_a: np.ndarray, sig_b: np.ndarray) -> float:
        if sig_a.shape != sig_b.shape:
            raise ValueError("signatures differ in length")
        return float(np.count_nonzero(sig_a == sig_b)) / sig_a.size


def paragraph_segments(text: str) -> list[str]:
    return [p for p in re.split(r"\n\s*\n", text) if p.strip()]


def minhash_near_dup(
    docs: Iterable[RawDocument | CleanDocument],
    shingle_size: int = 3,
    num_perms: int = 256,
    lsh_bands: int = 32,
    threshold: float = 0.8,
    seed: int = 1,
) -> DedupReport:
    """Report near-duplicate paragraph pairs found by LSH banding.

    Segments are paragraphs, referenced as ``(doc_id, paragraph_index)``, so
    repeats within one file are caught as well as across files. Each
    candidate pair carries its MinHash-estimated Jaccard; only pairs at or
    above ``threshold`` are reported.
    """
    if lsh_bands < 1 or num_perms % lsh_bands:
        raise ValueError(f"num_perms ({num_perms}) must be divisible by lsh_bands ({lsh_bands})")
    rows = num_perms // lsh_bands
    hasher = MinHasher(num_perms, seed)

    refs: list[tuple[str, int]] = []
    sigs: list[np.ndarray] = []
    for doc in docs:
        for i, para in enumerate(paragraph_segments(doc.text)):
            refs.append((doc.id, i))
            sigs.append(hasher.signature(word_shingles(para, shingle_size)))

    buckets: dict[tuple[int, bytes], list[int]] = defaultdict(list)
    for idx, sig in enumerate(sigs):
        for band in range(lsh_bands):
            buckets[(band, sig[band * rows : (band + 1) * rows].tobytes())].append(idx)

    candidates: set[tuple[int, int]] = set()
    for members in buckets.values():
        for x in range(len(members)):
            for y in range(x + 1, len(members)):
                candidates.add((members[x], members[y]))

    pairs = []
    for i, j in sorted(candidates):
        est = MinHasher.jaccard(sigs[i], sigs[j])
        if est >= threshold:
            pairs.append(NearDuplicatePair(refs[i], refs[j], est))
    return DedupReport(
        algorithm="sha256",
        near_duplicate_pairs=pairs,
        minhash={
            "shingle": "word",
            "shingle_size": shingle_size,
            "num_perms": num_perms,
            "lsh_bands": lsh_bands,
            "rows_per_band": rows,
            "threshold": threshold,
            "segment": "paragraph",
            "seed": seed,
        },
    )


def drop_near_duplicate_segments(doc: CleanDocument, pairs: Iterable[NearDuplicatePair]) -> CleanDocument:
    """Remove the later paragraph of every within-document near-duplicate pair."""
    drop = {p.b[1] for p in pairs if p.a[0] == doc.id and p.b[0] == doc.id}
    if not drop:
        return doc
    paras = paragraph_segments(doc.text)
    text = "\n\n".join(p for i, p in enumerate(paras) if i not in drop)
    log = doc.cleaning_log + [("near_duplicate_segments", len(drop))]
    return CleanDocument(doc.id, text, dict(doc.metadata), doc.source, log)


# ---------------------------------------------------------------------------
# JSON-lines I/O


def read_jsonl(path) -> Iterator[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc


def write_jsonl(path, rows: Iterable[dict[str, Any]]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
            n += 1
    return n


def clean_corpus(
    docs: Sequence[RawDocument],
    config: CleaningConfig | None = None,
    near_dup: dict[str, Any] | None = None,
) -> tuple[list[CleanDocument], DedupReport]:
    """Exact-dedup, clean, then drop within-file near-duplicate paragraphs."""
    report = exact_dedup(docs)
    kept = set(report.kept)
    cleaned = [clean_document(d, config) for d in docs if d.id in kept]
    near = minhash_near_dup(cleaned, **(near_dup or {}))
    report.near_duplicate_pairs = near.near_duplicate_pairs
    report.minhash = near.minhash
    cleaned = [drop_near_duplicate_segments(d, near.near_duplicate_pairs) for d in cleaned]
    return cleaned, report
