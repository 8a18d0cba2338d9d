"""Document normalization, tokenization, and boundary-aware chunking.

Chunk texts are raw substrings of the normalized body, so concatenating them
in seq order (dropping the shared overlap region after a hard token cut)
reproduces the normalized body exactly.
"""

from __future__ import annotations

import hashlib
import re
import unicodedata
from bisect import bisect_left
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from typing import Optional, Sequence

from .errors import RejectedDocument

# Maximal runs of Unicode alphanumerics; underscore is a separator.
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
_SENTENCE_END_RE = re.compile(r"(?<=[.!?])\s+")


class MaterialType(str, Enum):
    Lecture = "Lecture"
    Assignment = "Assignment"
    Syllabus = "Syllabus"
    Other = "Other"


@dataclass(frozen=True)
class SourceDocument:
    doc_id: str
    course_id: str
    material_type: MaterialType
    title: str
    body: str
    origin_uri: Optional[str] = None


@dataclass
class MaterialChunk:
    chunk_id: str
    doc_id: str
    course_id: str
    material_type: MaterialType
    seq: int
    text: str
    token_count: int
    embedding: Optional[Sequence[float]] = field(default=None, repr=False)


@dataclass(frozen=True)
class ChunkingPolicy:
    max_chunk_tokens: int = 512
    overlap_tokens: int = 64

    def __post_init__(self) -> None:
        if self.max_chunk_tokens < 1:
            raise ValueError("max_chunk_tokens must be >= 1")
        if not 0 <= self.overlap_tokens < self.max_chunk_tokens:
            raise ValueError("overlap_tokens must satisfy 0 <= overlap < max_chunk_tokens")


def normalize_text(text: str) -> str:
    """NFC, CRLF -> LF, per-line trailing whitespace stripped, big blank runs collapsed.

    Idempotent. Runs of three or more blank lines collapse to a single blank
    line; runs of one or two survive unchanged.
    """
    text = unicodedata.normalize("NFC", text)
    text = text.replace("\r\n", "\n")
    lines = [line.rstrip() for line in text.split("\n")]
    out: list[str] = []
    i = 0
    while i < len(lines):
        if lines[i]:
            out.append(lines[i])
            i += 1
            continue
        j = i
        while j < len(lines) and not lines[j]:
            j += 1
        out.extend([""] * (1 if j - i >= 3 else j - i))
        i = j
    return "\n".join(out)


def tokenize(text: str) -> list[str]:
    """Lowercased lexical tokens: maximal alphanumeric runs."""
    return [m.group().lower() for m in _TOKEN_RE.finditer(text)]


def token_count(text: str) -> int:
    return sum(1 for _ in _TOKEN_RE.finditer(text))


def make_chunk_id(course_id: str, doc_id: str, seq: int, text: str) -> str:
    """Stable content hash; identical inputs always map to the same id."""
    payload = "\x1f".join((course_id, doc_id, str(seq), text)).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:32]


# -- chunking ----------------------------------------------------------------

# A unit is an atomic char span [start, end) of the body. `fresh` forces the
# packer to close the open chunk first (set on the head of an oversize
# paragraph so cuts prefer the paragraph boundary).
@dataclass(frozen=True)
class _Unit:
    start: int
    end: int
    fresh: bool = False


def _fenced_spans(body: str) -> list[tuple[int, int]]:
    """Char spans of markdown fenced code blocks, opening fence line through
    closing fence line (an unclosed fence runs to end of text)."""
    spans: list[tuple[int, int]] = []
    open_at: int | None = None
    pos = 0
    for line in body.split("\n"):
        end = pos + len(line)
        if line.lstrip().startswith("```"):
            if open_at is None:
                open_at = pos
            else:
                spans.append((open_at, min(end + 1, len(body))))
                open_at = None
        pos = end + 1
    if open_at is not None:
        spans.append((open_at, len(body)))
    return spans


def _inside(pos: int, spans: list[tuple[int, int]]) -> bool:
    return any(s <= pos < e for s, e in spans)


def _paragraph_units(body: str) -> list[tuple[int, int, bool]]:
    """Tile the body into paragraph spans; separators stay attached to the
    preceding span. Returns (start, end, protected) triples where protected
    marks fenced code blocks that must never be sentence-split."""
    fences = _fenced_spans(body)
    boundaries = [0]
    for m in re.finditer(r"\n\n\n?", body):
        if not _inside(m.start(), fences) and not _inside(m.end() - 1, fences):
            boundaries.append(m.end())
    # fence edges are also unit boundaries so fences stay atomic
    for s, e in fences:
        boundaries.extend((s, e))
    boundaries = sorted(set(b for b in boundaries if 0 <= b < len(body)))
    boundaries.append(len(body))
    units = []
    for a, b in zip(boundaries, boundaries[1:]):
        if a < b:
            units.append((a, b, _inside(a, fences)))
    return units


def _sentence_units(body: str, start: int, end: int) -> list[_Unit]:
    cuts = [m.end() for m in _SENTENCE_END_RE.finditer(body, start, end) if m.end() < end]
    points = [start] + cuts + [end]
    return [_Unit(a, b) for a, b in zip(points, points[1:])]


def chunk_document(doc: SourceDocument, policy: ChunkingPolicy) -> list[MaterialChunk]:
    """Split a normalized document body into retrieval chunks.

    Cut preference: paragraph break, then sentence break, then hard token cut.
    Only a hard cut introduces overlap, and then the next chunk starts exactly
    policy.overlap_tokens tokens before the cut. Every chunk holds between 1
    and max_chunk_tokens tokens.
    """
    body = doc.body
    if not body.strip():
        raise RejectedDocument(f"document {doc.doc_id!r} has an empty body")
    matches = list(_TOKEN_RE.finditer(body))
    if not matches:
        raise RejectedDocument(f"document {doc.doc_id!r} has no indexable tokens")
    token_starts = [m.start() for m in matches]
    max_tok, overlap = policy.max_chunk_tokens, policy.overlap_tokens

    def ntokens(a: int, b: int) -> int:
        # tokens never straddle unit/chunk boundaries, so counting starts is enough
        return bisect_left(token_starts, b) - bisect_left(token_starts, a)

    units: list[_Unit] = []
    for a, b, protected in _paragraph_units(body):
        if ntokens(a, b) > max_tok and not protected:
            sentences = _sentence_units(body, a, b)
            units.append(_Unit(sentences[0].start, sentences[0].end, fresh=True))
            units.extend(sentences[1:])
        else:
            units.append(_Unit(a, b))

    spans: list[tuple[int, int]] = []  # emitted chunk char spans
    cur_start: int | None = None
    cur_end = 0
    cur_ntok = 0

    def emit(end: int) -> None:
        nonlocal cur_start, cur_ntok
        spans.append((cur_start, end))  # type: ignore[arg-type]
        cur_start = None
        cur_ntok = 0

    for unit in units:
        n = ntokens(unit.start, unit.end)
        if cur_start is not None and cur_ntok > 0 and (unit.fresh or cur_ntok + n > max_tok):
            emit(unit.start)
        if cur_start is None:
            cur_start = unit.start
        if cur_ntok + n <= max_tok:
            cur_ntok += n
            cur_end = unit.end
            continue
        # Unit alone exceeds capacity even from a fresh chunk: hard token cuts
        # with overlap backstep. Any token-less prefix stays in the first cut.
        first = bisect_left(token_starts, unit.start)
        e = first + max_tok
        emit(token_starts[e])
        s = e - overlap
        while bisect_left(token_starts, unit.end) - s > max_tok:
            cur_start = token_starts[s]
            e = s + max_tok
            emit(token_starts[e])
            s = e - overlap
        cur_start = token_starts[s]
        cur_ntok = bisect_left(token_starts, unit.end) - s
        cur_end = unit.end

    if cur_start is not None:
        if cur_ntok > 0:
            emit(cur_end)
        elif spans:
            spans[-1] = (spans[-1][0], cur_end)  # token-less tail joins the last chunk

    chunks = []
    for seq, (a, b) in enumerate(spans):
        text = body[a:b]
        chunks.append(
            MaterialChunk(
                chunk_id=make_chunk_id(doc.course_id, doc.doc_id, seq, text),
                doc_id=doc.doc_id,
                course_id=doc.course_id,
                material_type=doc.material_type,
                seq=seq,
                text=text,
                token_count=ntokens(a, b),
            )
        )
    return chunks


def reassemble(chunks: Sequence[MaterialChunk], policy: ChunkingPolicy) -> str:
    """Inverse of chunk_document: concatenate chunk texts, dropping the
    duplicated overlap region after each hard cut.

    A hard cut leaves a signature (previous chunk full, next chunk starting
    with its last overlap_tokens tokens). Ordinary text can fake that
    signature, so when one fires the result is verified by re-chunking and,
    on mismatch, the ambiguous junctions are searched for the join that
    reproduces the input chunks.
    """
    if not chunks:
        return ""
    parts = [c.text for c in chunks]
    signatures: list[tuple[int, int]] = []  # (junction index, chars to drop)
    for i, (prev, cur) in enumerate(zip(chunks, chunks[1:])):
        if not policy.overlap_tokens or prev.token_count != policy.max_chunk_tokens:
            continue
        starts = [m.start() for m in _TOKEN_RE.finditer(prev.text)]
        if len(starts) < policy.overlap_tokens:
            continue
        candidate = prev.text[starts[len(starts) - policy.overlap_tokens]:]
        if candidate and cur.text.startswith(candidate):
            signatures.append((i + 1, len(candidate)))

    def join(active: frozenset) -> str:
        drops = {idx: n for idx, n in signatures if idx in active}
        return parts[0] + "".join(
            text[drops.get(j, 0):] for j, text in enumerate(parts[1:], start=1)
        )

    every = frozenset(idx for idx, _ in signatures)
    best = join(every)
    if not signatures or len(signatures) > 12:
        return best

    head = chunks[0]
    def reproduces(body: str) -> bool:
        doc = SourceDocument(head.doc_id, head.course_id, head.material_type, "", body)
        try:
            regen = chunk_document(doc, policy)
        except RejectedDocument:
            return False
        return [c.text for c in regen] == parts

    if reproduces(best):
        return best
    indices = sorted(every)
    for r in range(len(indices) - 1, -1, -1):
        for combo in combinations(indices, r):
            body = join(frozenset(combo))
            if reproduces(body):
                return body
    return best
