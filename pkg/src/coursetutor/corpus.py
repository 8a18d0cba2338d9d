"""File-backed corpus store: one directory per course, JSONL inside."""

from __future__ import annotations

import json
import os
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

from .errors import RejectedDocument, UnknownCourse
from .ingest import (
    ChunkingPolicy,
    MaterialChunk,
    MaterialType,
    SourceDocument,
    chunk_document,
    normalize_text,
)

COURSE_ID_RE = re.compile(r"^[a-z0-9-]{1,64}$")

_DOC_FIELDS = ("doc_id", "course_id", "material_type", "title", "body", "origin_uri")
_CHUNK_FIELDS = ("chunk_id", "doc_id", "course_id", "material_type", "seq", "text", "token_count")


@dataclass(frozen=True)
class IngestReport:
    doc_id: str
    course_id: str
    chunks_written: int
    tokens_indexed: int
    replaced: bool


def _dump_line(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


class CorpusStore:
    """Documents and chunks for every course, stored under root/<course_id>/.

    documents.jsonl holds SourceDocuments (normalized body included);
    chunks.jsonl holds MaterialChunks without embeddings. Re-ingesting a
    doc_id replaces its previous document and chunks atomically.
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()

    # -- courses --

    def course_dir(self, course_id: str) -> Path:
        if not COURSE_ID_RE.match(course_id):
            raise ValueError(f"invalid course_id: {course_id!r}")
        return self.root / course_id

    def create_course(self, course_id: str) -> bool:
        """Returns False if the course directory already existed."""
        path = self.course_dir(course_id)
        with self._lock:
            if path.exists():
                return False
            path.mkdir(parents=True)
            return True

    def has_course(self, course_id: str) -> bool:
        return COURSE_ID_RE.match(course_id) is not None and self.course_dir(course_id).is_dir()

    def list_courses(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if p.is_dir())

    # -- ingestion --

    def ingest(self, doc: SourceDocument, policy: Optional[ChunkingPolicy] = None) -> IngestReport:
        """Normalize, chunk, and persist one document. Idempotent per content."""
        policy = policy or ChunkingPolicy()
        if not doc.doc_id or not doc.doc_id.strip():
            raise RejectedDocument("doc_id must be non-empty")
        if not isinstance(doc.material_type, MaterialType):
            raise RejectedDocument(f"unknown material_type: {doc.material_type!r}")
        with self._lock:
            if not self.has_course(doc.course_id):
                raise UnknownCourse(doc.course_id)
            body = normalize_text(doc.body)
            if not body.strip():
                raise RejectedDocument(f"document {doc.doc_id!r} has an empty body")
            normalized = SourceDocument(
                doc_id=doc.doc_id,
                course_id=doc.course_id,
                material_type=doc.material_type,
                title=doc.title,
                body=body,
                origin_uri=doc.origin_uri,
            )
            chunks = chunk_document(normalized, policy)

            existing = self.load_documents(doc.course_id)
            docs = [d for d in existing if d.doc_id != doc.doc_id]
            replaced = len(docs) != len(existing)
            kept = [c for c in self.load_chunks(doc.course_id) if c.doc_id != doc.doc_id]
            self._write_jsonl(
                self.course_dir(doc.course_id) / "documents.jsonl",
                (self._doc_record(d) for d in docs + [normalized]),
            )
            self._write_jsonl(
                self.course_dir(doc.course_id) / "chunks.jsonl",
                (self._chunk_record(c) for c in kept + chunks),
            )
            return IngestReport(
                doc_id=doc.doc_id,
                course_id=doc.course_id,
                chunks_written=len(chunks),
                tokens_indexed=sum(c.token_count for c in chunks),
                replaced=replaced,
            )

    # -- reads --

    def load_documents(self, course_id: str) -> list[SourceDocument]:
        path = self._existing(course_id) / "documents.jsonl"
        docs = []
        for record in self._read_jsonl(path):
            docs.append(
                SourceDocument(
                    doc_id=record["doc_id"],
                    course_id=record["course_id"],
                    material_type=MaterialType(record["material_type"]),
                    title=record["title"],
                    body=record["body"],
                    origin_uri=record.get("origin_uri"),
                )
            )
        return docs

    def load_chunks(self, course_id: str) -> list[MaterialChunk]:
        path = self._existing(course_id) / "chunks.jsonl"
        chunks = []
        for record in self._read_jsonl(path):
            chunks.append(
                MaterialChunk(
                    chunk_id=record["chunk_id"],
                    doc_id=record["doc_id"],
                    course_id=record["course_id"],
                    material_type=MaterialType(record["material_type"]),
                    seq=record["seq"],
                    text=record["text"],
                    token_count=record["token_count"],
                )
            )
        return chunks

    def material_counts(self, course_id: str) -> dict[str, int]:
        counts: dict[str, int] = {}
        for doc in self.load_documents(course_id):
            counts[doc.material_type.value] = counts.get(doc.material_type.value, 0) + 1
        return counts

    def document_titles(self, course_id: str) -> dict[str, str]:
        return {d.doc_id: d.title for d in self.load_documents(course_id)}

    # -- plumbing --

    def _existing(self, course_id: str) -> Path:
        if not self.has_course(course_id):
            raise UnknownCourse(course_id)
        return self.course_dir(course_id)

    @staticmethod
    def _doc_record(doc: SourceDocument) -> dict:
        record = {
            "doc_id": doc.doc_id,
            "course_id": doc.course_id,
            "material_type": doc.material_type.value,
            "title": doc.title,
            "body": doc.body,
        }
        if doc.origin_uri is not None:
            record["origin_uri"] = doc.origin_uri
        return record

    @staticmethod
    def _chunk_record(chunk: MaterialChunk) -> dict:
        return {
            "chunk_id": chunk.chunk_id,
            "doc_id": chunk.doc_id,
            "course_id": chunk.course_id,
            "material_type": chunk.material_type.value,
            "seq": chunk.seq,
            "text": chunk.text,
            "token_count": chunk.token_count,
        }

    @staticmethod
    def _read_jsonl(path: Path) -> Iterable[dict]:
        if not path.exists():
            return []
        with path.open("r", encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]

    @staticmethod
    def _write_jsonl(path: Path, records: Iterable[dict]) -> None:
        # write-then-rename so readers never observe a half-written file
        tmp = path.with_suffix(path.suffix + ".tmp")
        with tmp.open("w", encoding="utf-8") as fh:
            for record in records:
                fh.write(_dump_line(record) + "\n")
        os.replace(tmp, path)
