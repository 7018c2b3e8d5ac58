"""Structure-preserving two-pass chunking.

Offsets throughout are Python string indices into the cleaned document text.
A "word" is a maximal run of non-whitespace characters.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

SPAN_KINDS = ("latex-inline", "latex-display", "markdown-table")

_MD_HEADING = re.compile(r"^(#{1,6})[ \t]+(\S.*?)[ \t#]*$")
_NUM_HEADING = re.compile(r"^((?:\d+\.)*\d+)\.?[ \t]+([A-Z][^\n]*)$")
_TABLE_SEP = re.compile(r"^\s*\|?\s*:?-+:?\s*(\|\s*:?-+:?\s*)*\|?\s*$")
_MATH_ENVS = ("equation", "align", "eqnarray", "gather", "multline", "displaymath", "math")
_BEGIN_ENV = re.compile(r"\\begin\{(" + "|".join(_MATH_ENVS) + r")(\*?)\}")
_BLANK_LINE = re.compile(r"\n[ \t]*\n")
_SENTENCE_END = re.compile(r"[.!?][\"')\]]*\s+")
_WORD = re.compile(r"\S+")


@dataclass(frozen=True)
class ProtectedSpan:
    start: int
    end: int
    kind: str

    def __post_init__(self) -> None:
        if not self.start < self.end:
            raise ValueError(f"empty protected span {self.start}..{self.end}")
        if self.kind not in SPAN_KINDS:
            raise ValueError(f"unknown span kind {self.kind!r}")


@dataclass
class ChunkConfig:
    target_words: int = 512
    hard_max_words: int = 640
    sentence_fallback: bool = True
    min_words: int = 20
    min_alpha_ratio: float = 0.4
    min_distinct_ratio: float = 0.2

    def __post_init__(self) -> None:
        if not 0 < self.target_words <= self.hard_max_words:
            raise ValueError("need 0 < target_words <= hard_max_words")

    @classmethod
    def for_target(cls, target_words: int, **kw) -> "ChunkConfig":
        """Config with ``hard_max_words`` at 1.25x the target."""
        return cls(target_words=target_words, hard_max_words=max(target_words, -(-target_words * 5 // 4)), **kw)

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "ChunkConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown chunk config keys: {sorted(unknown)}")
        if "target_words" in obj and "hard_max_words" not in obj:
            rest = {k: v for k, v in obj.items() if k != "target_words"}
            return cls.for_target(obj["target_words"], **rest)
        return cls(**obj)


@dataclass
class Section:
    start: int
    end: int
    path: list[str]


@dataclass
class Structure:
    sections: list[Section]
    paragraphs: list[tuple[int, int]]
    sentences: list[tuple[int, int]]
    protected_spans: list[ProtectedSpan]
    warnings: list[str] = field(default_factory=list)


@dataclass
class Chunk:
    chunk_id: str
    doc_id: str
    text: str
    word_count: int
    section_path: list[str] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)
    start: int = 0
    end: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "Chunk":
        return cls(**{k: obj[k] for k in cls.__dataclass_fields__ if k in obj})


def count_words(text: str) -> int:
    return len(text.split())


# ---------------------------------------------------------------------------
# Structure detection


def _paragraph_end(text: str, pos: int) -> int:
    m = _BLANK_LINE.search(text, pos)
    return m.start() if m else len(text)


def _line_spans(text: str) -> list[tuple[int, int]]:
    spans, pos = [], 0
    for line in text.split("\n"):
        spans.append((pos, pos + len(line)))
        pos += len(line) + 1
    return spans


def _find_tables(text: str) -> list[ProtectedSpan]:
    lines = _line_spans(text)
    tables: list[ProtectedSpan] = []
    i = 0
    while i < len(lines):
        j = i
        while j < len(lines) and text[lines[j][0] : lines[j][1]].lstrip().startswith("|"):
            j += 1
        if j - i >= 2 and _TABLE_SEP.match(text[lines[i + 1][0] : lines[i + 1][1]]):
            start = lines[i][0] + (len(text[lines[i][0] : lines[i][1]]) - len(text[lines[i][0] : lines[i][1]].lstrip()))
            end = lines[j - 1][1]
            while end > start and text[end - 1].isspace():
                end -= 1
            tables.append(ProtectedSpan(start, end, "markdown-table"))
        i = max(j, i + 1)
    return tables


def _escaped(text: str, pos: int) -> bool:
    n = 0
    while pos - 1 - n >= 0 and text[pos - 1 - n] == "\\":
        n += 1
    return n % 2 == 1


def _find_unescaped(text: str, needle: str, start: int, stop: int) -> int:
    pos = start
    while True:
        pos = text.find(needle, pos, stop)
        if pos < 0 or not _escaped(text, pos):
            return pos
        pos += 1


def _find_math(text: str, skip: list[ProtectedSpan], warnings: list[str]) -> list[ProtectedSpan]:
    spans: list[ProtectedSpan] = []
    skip_iter = iter(sorted(skip, key=lambda s: s.start))
    nxt = next(skip_iter, None)
    i, n = 0, len(text)

    def close(start: int, end_found: int, width: int, kind: str, opener: str) -> int:
        if end_found < 0:
            end = _paragraph_end(text, start)
            warnings.append(f"unterminated {opener} at offset {start}; span extended to end of paragraph")
        else:
            end = end_found + width
        if end > start:
            spans.append(ProtectedSpan(start, end, kind))
        return max(end, start + 1)

    while i < n:
        if nxt is not None and i >= nxt.start:
            i = max(i, nxt.end)
            nxt = next(skip_iter, None)
            continue
        ch = text[i]
        if ch not in "$\\" or _escaped(text, i):
            i += 1
            continue
        if text.startswith("$$", i):
            i = close(i, _find_unescaped(text, "$$", i + 2, n), 2, "latex-display", "$$")
        elif ch == "$":
            i = close(i, _find_unescaped(text, "$", i + 1, _paragraph_end(text, i)), 1, "latex-inline", "$")
        elif text.startswith("\\[", i):
            i = close(i, text.find("\\]", i + 2), 2, "latex-display", "\\[")
        elif text.startswith("\\(", i):
            i = close(i, text.find("\\)", i + 2, _paragraph_end(text, i)), 2, "latex-inline", "\\(")
        elif m := _BEGIN_ENV.match(text, i):
            closer = f"\\end{{{m.group(1)}{m.group(2)}}}"
            i = close(i, text.find(closer, m.end()), len(closer), "latex-display", m.group(0))
        else:
            i += 1
    return spans


def detect_protected_spans(text: str, warnings: list[str] | None = None) -> list[ProtectedSpan]:
    """Markdown tables plus LaTeX math (inline, display, environments), sorted."""
    warnings = [] if warnings is None else warnings
    tables = _find_tables(text)
    spans = tables + _find_math(text, tables, warnings)
    spans.sort(key=lambda s: s.start)
    merged: list[ProtectedSpan] = []
    for s in spans:
        if merged and s.start < merged[-1].end:
            last = merged.pop()
            kind = last.kind if last.end - last.start >= s.end - s.start else s.kind
            merged.append(ProtectedSpan(last.start, max(last.end, s.end), kind))
        else:
            merged.append(s)
    return merged


def _inside(spans: Sequence[ProtectedSpan], pos: int) -> bool:
    # spans sorted and disjoint; a cut at span.start or span.end is fine
    lo, hi = 0, len(spans)
    while lo < hi:
        mid = (lo + hi) // 2
        if spans[mid].end <= pos:
            lo = mid + 1
        else:
            hi = mid
    return lo < len(spans) and spans[lo].start < pos < spans[lo].end


def _headings(text: str, spans: Sequence[ProtectedSpan]) -> list[tuple[int, int, str]]:
    """``(offset, level, title)`` for heading lines outside protected spans."""
    out = []
    for start, end in _line_spans(text):
        line = text[start:end].strip()
        if not line or _inside(spans, start) or _inside(spans, start + 1):
            continue
        m = _MD_HEADING.match(line)
        if m:
            out.append((start, len(m.group(1)), m.group(2).strip()))
            continue
        m = _NUM_HEADING.match(line)
        if m and len(line.split()) <= 8 and line[-1] not in ".:;,?!":
            out.append((start, m.group(1).count(".") + 1, line))
    return out


def _cut_points(text: str, start: int, end: int, rx: re.Pattern, spans) -> list[int]:
    cuts = []
    for m in rx.finditer(text, start, end):
        p = m.end()
        if start < p < end and not _inside(spans, p):
            cuts.append(p)
    return cuts


def _split_ranges(start: int, end: int, cuts: Iterable[int]) -> list[tuple[int, int]]:
    bounds = [start, *sorted(set(cuts)), end]
    return [(a, b) for a, b in zip(bounds, bounds[1:]) if b > a]


def detect_structure(text: str) -> Structure:
    warnings: list[str] = []
    spans = detect_protected_spans(text, warnings)

    heads = _headings(text, spans)
    sections: list[Section] = []
    stack: list[tuple[int, str]] = []
    starts = [h[0] for h in heads]
    if not starts or starts[0] > 0:
        if text[: starts[0] if starts else len(text)].strip():
            sections.append(Section(0, starts[0] if starts else len(text), []))
        elif starts:
            # whitespace-only preamble is folded into the first section
            heads[0] = (0, heads[0][1], heads[0][2])
    for idx, (pos, level, title) in enumerate(heads):
        while stack and stack[-1][0] >= level:
            stack.pop()
        stack.append((level, title))
        end = heads[idx + 1][0] if idx + 1 < len(heads) else len(text)
        sections.append(Section(pos, end, [t for _, t in stack]))

    paragraphs = _split_ranges(0, len(text), _cut_points(text, 0, len(text), _BLANK_LINE, spans))
    sentences = _split_ranges(0, len(text), _cut_points(text, 0, len(text), _SENTENCE_END, spans))
    return Structure(sections, paragraphs, sentences, spans, warnings)


# ---------------------------------------------------------------------------
# Chunking


def _words_in(text: str, start: int, end: int) -> int:
    return len(_WORD.findall(text, start, end))


class _Packer:
    def __init__(self, text: str, spans: Sequence[ProtectedSpan], config: ChunkConfig):
        self.text = text
        self.spans = spans
        self.cfg = config
        self.out: list[tuple[int, int, list[str]]] = []

    def units(self, start: int, end: int, level: int) -> list[tuple[int, int, list[str]]]:
        """Atomic ranges for [start, end), each at most target words where possible."""
        if _words_in(self.text, start, end) <= self.cfg.target_words:
            return [(start, end, [])]
        if level == 0:
            cuts = _cut_points(self.text, start, end, _BLANK_LINE, self.spans)
        elif level == 1 and self.cfg.sentence_fallback:
            cuts = _cut_points(self.text, start, end, _SENTENCE_END, self.spans)
        elif level <= 1:
            return self.units(start, end, 2)
        else:
            return self._word_units(start, end)
        pieces = _split_ranges(start, end, cuts)
        out = []
        for a, b in pieces:
            out.extend(self.units(a, b, level + 1))
        return out

    def _word_units(self, start: int, end: int) -> list[tuple[int, int, list[str]]]:
        words = [m.start() for m in _WORD.finditer(self.text, start, end)]
        cuts = [p for p in words[1:] if not _inside(self.spans, p)]
        units = []
        for a, b in _split_ranges(start, end, cuts):
            n = _words_in(self.text, a, b)
            warn = []
            if n > self.cfg.hard_max_words:
                warn.append(f"oversize protected span: {n} words exceeds hard max {self.cfg.hard_max_words}")
            units.append((a, b, warn))
        return units

    def pack(self, start: int, end: int) -> None:
        cur_start, cur_words = None, 0
        cur_end = start
        cur_warn: list[str] = []
        for a, b, warn in self.units(start, end, 0):
            n = _words_in(self.text, a, b)
            if cur_start is not None and cur_words + n > self.cfg.target_words:
                self.out.append((cur_start, cur_end, cur_warn))
                cur_start, cur_words, cur_warn = None, 0, []
            if cur_start is None:
                cur_start = a
            cur_end = b
            cur_words += n
            cur_warn = cur_warn + warn
        if cur_start is not None:
            self.out.append((cur_start, cur_end, cur_warn))


def chunk_document(
    doc_id: str,
    text: str,
    config: ChunkConfig | None = None,
    metadata: dict[str, Any] | None = None,
    structure: Structure | None = None,
) -> list[Chunk]:
    """Split a document into chunks: one per small section, packed pieces otherwise.

    Chunks cover the source contiguously; only whitespace at chunk edges is
    trimmed, so the chunks joined back together reproduce the text up to
    whitespace.
    """
    cfg = config or ChunkConfig()
    if not text.strip():
        return []
    st = structure or detect_structure(text)
    chunks: list[Chunk] = []
    for sec in st.sections:
        packer = _Packer(text, st.protected_spans, cfg)
        packer.pack(sec.start, sec.end)
        for a, b, warn in packer.out:
            raw = text[a:b]
            lead = len(raw) - len(raw.lstrip())
            body = raw.strip()
            if not body:
                continue
            chunks.append(
                Chunk(
                    chunk_id=f"{doc_id}::{len(chunks):04d}",
                    doc_id=doc_id,
                    text=body,
                    word_count=count_words(body),
                    section_path=list(sec.path),
                    metadata=dict(metadata or {}),
                    start=a + lead,
                    end=a + lead + len(body),
                    warnings=list(warn),
                )
            )
    return chunks


def filter_uninformative(
    chunks: Iterable[Chunk], config: ChunkConfig | None = None
) -> tuple[list[Chunk], list[tuple[Chunk, str]]]:
    """Split chunks into kept and dropped; dropped ones carry a reason code.

    Reason codes: ``too-short``, ``low-alpha``, ``low-diversity``.
    """
    cfg = config or ChunkConfig()
    kept, dropped = [], []
    for ch in chunks:
        words = ch.text.split()
        chars = [c for c in ch.text if not c.isspace()]
        if len(words) < cfg.min_words:
            dropped.append((ch, "too-short"))
        elif not chars or sum(c.isalpha() for c in chars) / len(chars) < cfg.min_alpha_ratio:
            dropped.append((ch, "low-alpha"))
        elif len({w.lower() for w in words}) / len(words) < cfg.min_distinct_ratio:
            dropped.append((ch, "low-diversity"))
        else:
            kept.append(ch)
    return kept, dropped
