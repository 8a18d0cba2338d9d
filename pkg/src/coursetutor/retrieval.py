"""Hybrid retrieval: BM25 lexical ranking fused with exact dense search.

Both channels rank course chunks; reciprocal-rank fusion merges them.
Snapshots are immutable per course and swapped atomically after ingestion,
so concurrent queries always see a consistent corpus.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

from .corpus import CorpusStore
from .errors import (
    DimensionMismatch,
    EmptyCorpus,
    EmptyQuery,
    ProviderError,
    UnknownChunk,
    UnknownCourse,
)
from .ingest import MaterialChunk, MaterialType, tokenize

logger = logging.getLogger(__name__)

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_K_RRF = 60

LEXICAL = "lexical"
DENSE = "dense"
CHANNELS = (LEXICAL, DENSE)


# -- lexical index -----------------------------------------------------------

@dataclass
class LexicalIndex:
    postings: dict[str, list[tuple[str, int]]]
    doc_lengths: dict[str, int]
    avg_doc_length: float
    corpus_size: int


def build_lexical_index(chunks: Iterable[MaterialChunk]) -> LexicalIndex:
    postings: dict[str, dict[str, int]] = {}
    doc_lengths: dict[str, int] = {}
    for chunk in chunks:
        doc_lengths[chunk.chunk_id] = chunk.token_count
        for term in tokenize(chunk.text):
            postings.setdefault(term, {}).setdefault(chunk.chunk_id, 0)
            postings[term][chunk.chunk_id] += 1
    ordered = {
        term: sorted(tfs.items()) for term, tfs in sorted(postings.items())
    }
    size = len(doc_lengths)
    avg = sum(doc_lengths.values()) / size if size else 0.0
    return LexicalIndex(ordered, doc_lengths, avg, size)


def bm25_score(
    index: LexicalIndex,
    query_terms: Sequence[str],
    chunk_id: str,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> float:
    """Okapi BM25. Each query term instance contributes independently, so a
    repeated term doubles its contribution."""
    if index.corpus_size == 0:
        raise EmptyCorpus("lexical index is empty")
    if chunk_id not in index.doc_lengths:
        raise UnknownChunk(chunk_id)
    length = index.doc_lengths[chunk_id]
    norm = k1 * (1 - b + b * (length / index.avg_doc_length))
    score = 0.0
    for term in query_terms:
        rows = index.postings.get(term)
        if not rows:
            continue
        tf = 0
        for cid, freq in rows:
            if cid == chunk_id:
                tf = freq
                break
        if tf == 0:
            continue
        df = len(rows)
        idf = math.log(1 + (index.corpus_size - df + 0.5) / (df + 0.5))
        score += idf * tf * (k1 + 1) / (tf + norm)
    return score


def lexical_topk(
    index: LexicalIndex,
    query_terms: Sequence[str],
    k: int,
    allowed: Optional[set[str]] = None,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> list[tuple[str, float]]:
    """Top-k chunks containing at least one query term, score descending,
    ties broken by chunk_id ascending. Accumulation order matches
    bm25_score so both paths produce identical floats."""
    if index.corpus_size == 0:
        raise EmptyCorpus("lexical index is empty")
    scores: dict[str, float] = {}
    for term in query_terms:
        rows = index.postings.get(term)
        if not rows:
            continue
        df = len(rows)
        idf = math.log(1 + (index.corpus_size - df + 0.5) / (df + 0.5))
        for chunk_id, tf in rows:
            if allowed is not None and chunk_id not in allowed:
                continue
            length = index.doc_lengths[chunk_id]
            norm = k1 * (1 - b + b * (length / index.avg_doc_length))
            scores[chunk_id] = scores.get(chunk_id, 0.0) + idf * tf * (k1 + 1) / (tf + norm)
    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    return ranked[:k]


# -- vector store ------------------------------------------------------------

_MAGIC = b"CAVS"
_VERSION = 1


class VectorStore:
    """Exhaustive-scan store of unit-norm embeddings keyed by chunk_id."""

    def __init__(self, dimension: Optional[int] = None):
        self.dimension = dimension
        self._vectors: dict[str, np.ndarray] = {}
        self._ids: list[str] = []
        self._matrix: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, chunk_id: str) -> bool:
        return chunk_id in self._vectors

    def chunk_ids(self) -> list[str]:
        return sorted(self._vectors)

    def add(self, chunk_id: str, vector: Sequence[float]) -> None:
        vec = np.asarray(vector, dtype=np.float64)
        if vec.ndim != 1:
            raise DimensionMismatch("vector must be one-dimensional")
        if self.dimension is None:
            self.dimension = int(vec.shape[0])
        elif vec.shape[0] != self.dimension:
            raise DimensionMismatch(
                f"expected dimension {self.dimension}, got {vec.shape[0]}"
            )
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ValueError("zero vector cannot be stored")
        self._vectors[chunk_id] = vec / norm
        self._matrix = None

    def get(self, chunk_id: str) -> np.ndarray:
        try:
            return self._vectors[chunk_id]
        except KeyError:
            raise UnknownChunk(chunk_id) from None

    def _dense(self) -> tuple[list[str], np.ndarray]:
        if self._matrix is None:
            self._ids = sorted(self._vectors)
            self._matrix = (
                np.stack([self._vectors[i] for i in self._ids])
                if self._ids
                else np.zeros((0, self.dimension or 0))
            )
        return self._ids, self._matrix

    def save(self, path: Path | str) -> None:
        ids, _ = self._dense()
        dim = self.dimension or 0
        tmp = Path(str(path) + ".tmp")
        with tmp.open("wb") as fh:
            fh.write(struct.pack("<4sIIQ", _MAGIC, _VERSION, dim, len(ids)))
            for chunk_id in ids:
                raw = chunk_id.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(self._vectors[chunk_id].astype("<f4").tobytes())
        tmp.replace(Path(path))

    @classmethod
    def load(cls, path: Path | str) -> "VectorStore":
        with Path(path).open("rb") as fh:
            header = fh.read(struct.calcsize("<4sIIQ"))
            magic, version, dim, count = struct.unpack("<4sIIQ", header)
            if magic != _MAGIC:
                raise ValueError(f"bad vector store magic: {magic!r}")
            if version != _VERSION:
                raise ValueError(f"unsupported vector store version: {version}")
            store = cls(dimension=dim or None)
            for _ in range(count):
                (id_len,) = struct.unpack("<H", fh.read(2))
                chunk_id = fh.read(id_len).decode("utf-8")
                raw = fh.read(4 * dim)
                vec = np.frombuffer(raw, dtype="<f4").astype(np.float64)
                store.add(chunk_id, vec)  # re-normalizes the f32 rounding away
        return store


def dense_search(
    store: VectorStore,
    query_vector: Sequence[float],
    k: int,
    allowed: Optional[set[str]] = None,
) -> list[tuple[str, float]]:
    """Exact cosine scan (vectors are unit-norm, so dot product == cosine).
    Ties break by chunk_id ascending. No approximation."""
    if len(store) == 0:
        raise EmptyCorpus("vector store is empty")
    query = np.asarray(query_vector, dtype=np.float64)
    if store.dimension is not None and query.shape[0] != store.dimension:
        raise DimensionMismatch(
            f"expected dimension {store.dimension}, got {query.shape[0]}"
        )
    ids, matrix = store._dense()
    scores = matrix @ query
    order = np.argsort(-scores, kind="stable")  # ids sorted asc -> stable = id tiebreak
    out: list[tuple[str, float]] = []
    for idx in order:
        chunk_id = ids[int(idx)]
        if allowed is not None and chunk_id not in allowed:
            continue
        out.append((chunk_id, float(scores[int(idx)])))
        if len(out) == k:
            break
    return out


# -- fusion ------------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalQuery:
    text: str
    course_id: str
    k: int = 6
    material_filter: Optional[frozenset[MaterialType]] = None
    channels: tuple[str, ...] = CHANNELS
    degraded: tuple[str, ...] = ()  # channels dropped at search time

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.channels or not set(self.channels) <= set(CHANNELS):
            raise ValueError(f"channels must be a non-empty subset of {CHANNELS}")


@dataclass(frozen=True)
class RetrievalHit:
    chunk_id: str
    fused_score: float
    lexical_rank: Optional[int] = None
    dense_rank: Optional[int] = None


@dataclass(frozen=True)
class RetrievalSet:
    hits: tuple[RetrievalHit, ...]
    query_echo: RetrievalQuery


def fuse(
    channel_rankings: dict[str, list[str]],
    k: int,
    k_rrf: int = DEFAULT_K_RRF,
) -> list[RetrievalHit]:
    """Reciprocal rank fusion over 1-based per-channel ranks:
    fused(c) = sum over channels of 1 / (k_rrf + rank(c))."""
    ranks: dict[str, dict[str, int]] = {}
    for channel, ordering in channel_rankings.items():
        for position, chunk_id in enumerate(ordering, start=1):
            ranks.setdefault(chunk_id, {})[channel] = position
    fused = []
    for chunk_id, by_channel in ranks.items():
        score = 0.0
        for channel in channel_rankings:  # fixed order keeps float sums stable
            if channel in by_channel:
                score += 1.0 / (k_rrf + by_channel[channel])
        fused.append(
            RetrievalHit(
                chunk_id=chunk_id,
                fused_score=score,
                lexical_rank=by_channel.get(LEXICAL),
                dense_rank=by_channel.get(DENSE),
            )
        )
    fused.sort(key=lambda hit: (-hit.fused_score, hit.chunk_id))
    return fused[:k]


# -- routing policies --------------------------------------------------------

@dataclass(frozen=True)
class RetrievalPolicy:
    category: str
    k: int
    material_filter: frozenset[MaterialType]
    channels: tuple[str, ...] = CHANNELS
    decompose: bool = False
    retrieve: bool = True


def policy_for(category: str) -> RetrievalPolicy:
    """Retrieval parameters per question intent category."""
    if category == "Lecture":
        return RetrievalPolicy(
            category, k=6, material_filter=frozenset({MaterialType.Lecture})
        )
    if category == "ExamPrep":
        return RetrievalPolicy(
            category,
            k=4,  # per sub-question
            material_filter=frozenset({MaterialType.Lecture, MaterialType.Syllabus}),
            decompose=True,
        )
    if category == "Assignment":
        return RetrievalPolicy(
            category,
            k=4,
            material_filter=frozenset({MaterialType.Assignment, MaterialType.Lecture}),
        )
    raise ValueError(f"unknown intent category: {category}")


# -- engine ------------------------------------------------------------------

class Embedder(Protocol):
    embedder_id: str

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        ...


@dataclass(frozen=True)
class CourseSnapshot:
    course_id: str
    chunks: dict[str, MaterialChunk]
    index: LexicalIndex
    store: VectorStore


class RetrievalEngine:
    """Per-course immutable snapshots over the corpus store.

    refresh() rebuilds a course snapshot (reusing cached embeddings for
    unchanged chunk ids) and swaps it in atomically; readers keep whatever
    snapshot they already grabbed.
    """

    def __init__(
        self,
        corpus: CorpusStore,
        embedder: Embedder,
        k1: float = DEFAULT_K1,
        b: float = DEFAULT_B,
        k_rrf: int = DEFAULT_K_RRF,
    ):
        self.corpus = corpus
        self.embedder = embedder
        self.k1, self.b, self.k_rrf = k1, b, k_rrf
        self._snapshots: dict[str, CourseSnapshot] = {}
        self._lock = threading.Lock()
        self._build_locks: dict[str, threading.Lock] = {}

    # -- snapshot lifecycle --

    def _vectors_path(self, course_id: str) -> Path:
        return self.corpus.course_dir(course_id) / "vectors.bin"

    def _meta_path(self, course_id: str) -> Path:
        return self.corpus.course_dir(course_id) / "embedder.json"

    def refresh(self, course_id: str, force_embed: bool = False) -> CourseSnapshot:
        if not self.corpus.has_course(course_id):
            raise UnknownCourse(course_id)
        chunks = {c.chunk_id: c for c in self.corpus.load_chunks(course_id)}
        cached = VectorStore()
        meta_path = self._meta_path(course_id)
        vec_path = self._vectors_path(course_id)
        if not force_embed and meta_path.exists() and vec_path.exists():
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            if meta.get("embedder_id") == self.embedder.embedder_id:
                cached = VectorStore.load(vec_path)

        store = VectorStore()
        missing = []
        for chunk_id in sorted(chunks):
            if chunk_id in cached:
                store.add(chunk_id, cached.get(chunk_id))
            else:
                missing.append(chunk_id)
        if missing:
            vectors = self.embedder.embed([chunks[cid].text for cid in missing])
            for chunk_id, vec in zip(missing, vectors):
                store.add(chunk_id, vec)
        if chunks:
            store.save(vec_path)
            # atomic rename so a concurrent reader never sees a half-written file
            meta_tmp = Path(str(meta_path) + ".tmp")
            meta_tmp.write_text(
                json.dumps(
                    {"embedder_id": self.embedder.embedder_id, "dimension": store.dimension}
                ),
                encoding="utf-8",
            )
            meta_tmp.replace(meta_path)
        snapshot = CourseSnapshot(course_id, chunks, build_lexical_index(chunks.values()), store)
        with self._lock:
            self._snapshots[course_id] = snapshot
        return snapshot

    def snapshot(self, course_id: str) -> CourseSnapshot:
        with self._lock:
            snap = self._snapshots.get(course_id)
            if snap is not None:
                return snap
            build_lock = self._build_locks.setdefault(course_id, threading.Lock())
        # serialize the first build per course; losers reuse the winner's snapshot
        with build_lock:
            with self._lock:
                snap = self._snapshots.get(course_id)
            if snap is None:
                snap = self.refresh(course_id)
        return snap

    # -- search --

    def hybrid_search(self, query: RetrievalQuery) -> RetrievalSet:
        """Run the requested channels, fuse with RRF, return top-k.

        An embedder failure degrades the search to the remaining channels and
        is flagged on query_echo instead of raising.
        """
        if not query.text.strip():
            raise EmptyQuery("query text is empty")
        snap = self.snapshot(query.course_id)
        if not snap.chunks:
            raise EmptyCorpus(query.course_id)

        allowed: Optional[set[str]] = None
        if query.material_filter is not None:
            allowed = {
                cid
                for cid, chunk in snap.chunks.items()
                if chunk.material_type in query.material_filter
            }

        rankings: dict[str, list[str]] = {}
        degraded: list[str] = []
        for channel in query.channels:
            if channel == LEXICAL:
                terms = tokenize(query.text)
                ranked = lexical_topk(snap.index, terms, query.k, allowed, self.k1, self.b)
                rankings[LEXICAL] = [cid for cid, _ in ranked]
            elif channel == DENSE:
                try:
                    qvec = self.embedder.embed([query.text])[0]
                except ProviderError as exc:
                    logger.warning("dense channel degraded for %r: %s", query.course_id, exc)
                    degraded.append(DENSE)
                    continue
                ranked_d = dense_search(snap.store, qvec, query.k, allowed)
                rankings[DENSE] = [cid for cid, _ in ranked_d]
        hits = fuse(rankings, query.k, self.k_rrf) if rankings else []
        echo = replace(query, degraded=tuple(degraded))
        return RetrievalSet(hits=tuple(hits), query_echo=echo)
