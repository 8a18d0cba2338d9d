import json

import pytest

from coursetutor.corpus import CorpusStore
from coursetutor.errors import RejectedDocument, UnknownCourse
from coursetutor.ingest import ChunkingPolicy, MaterialType, SourceDocument


@pytest.fixture()
def store(tmp_path):
    s = CorpusStore(tmp_path / "courses")
    s.create_course("cs101")
    return s


def lecture(body: str, doc_id: str = "lec1") -> SourceDocument:
    return SourceDocument(doc_id, "cs101", MaterialType.Lecture, "Lecture One", body)


def test_create_and_list_courses(tmp_path):
    store = CorpusStore(tmp_path)
    assert store.create_course("algo-1") is True
    assert store.create_course("algo-1") is False  # already there
    assert store.has_course("algo-1")
    assert not store.has_course("nope")
    store.create_course("zz-2")
    assert store.list_courses() == ["algo-1", "zz-2"]


def test_invalid_course_id_rejected(tmp_path):
    store = CorpusStore(tmp_path)
    for bad in ("", "UPPER", "has space", "a" * 65, "dots.bad"):
        with pytest.raises(ValueError):
            store.create_course(bad)


def test_ingest_report_and_files(store):
    report = store.ingest(lecture("Alpha beta gamma.\n\nDelta epsilon."))
    assert report.doc_id == "lec1"
    assert report.course_id == "cs101"
    assert report.chunks_written >= 1
    assert report.tokens_indexed == 5
    assert report.replaced is False

    docs = store.load_documents("cs101")
    assert [d.doc_id for d in docs] == ["lec1"]
    chunks = store.load_chunks("cs101")
    assert all(c.doc_id == "lec1" for c in chunks)
    assert [c.seq for c in chunks] == list(range(len(chunks)))


def test_ingest_unknown_course(store):
    bad = SourceDocument("d", "ghost", MaterialType.Lecture, "t", "body text")
    with pytest.raises(UnknownCourse):
        store.ingest(bad)


def test_ingest_empty_body_rejected(store):
    with pytest.raises(RejectedDocument):
        store.ingest(lecture("   \n \n  "))


def test_reingest_replaces_old_chunks(store):
    first = store.ingest(lecture("Original body with words."))
    old_ids = {c.chunk_id for c in store.load_chunks("cs101")}
    second = store.ingest(lecture("Completely different body now."))
    assert second.replaced is True
    new_ids = {c.chunk_id for c in store.load_chunks("cs101")}
    assert old_ids.isdisjoint(new_ids)
    assert len(store.load_documents("cs101")) == 1
    assert first.chunks_written == len(old_ids)


def test_reingest_same_doc_is_idempotent(store):
    body = "Stable text that does not change.\n\nSecond paragraph here."
    store.ingest(lecture(body))
    course = store.course_dir("cs101")
    before = {
        p.name: p.read_bytes() for p in course.iterdir() if p.suffix == ".jsonl"
    }
    report = store.ingest(lecture(body))
    after = {
        p.name: p.read_bytes() for p in course.iterdir() if p.suffix == ".jsonl"
    }
    assert report.replaced is True
    assert before == after


def test_jsonl_field_names_exact(store):
    store.ingest(
        SourceDocument(
            "hw1", "cs101", MaterialType.Assignment, "HW 1", "Solve problems.",
            origin_uri="file:///hw1.md",
        )
    )
    course = store.course_dir("cs101")
    doc_row = json.loads((course / "documents.jsonl").read_text().splitlines()[0])
    assert set(doc_row) == {
        "doc_id", "course_id", "material_type", "title", "body", "origin_uri"
    }
    assert doc_row["material_type"] == "Assignment"
    chunk_row = json.loads((course / "chunks.jsonl").read_text().splitlines()[0])
    assert set(chunk_row) == {
        "chunk_id", "doc_id", "course_id", "material_type", "seq", "text", "token_count"
    }


def test_normalization_applied_before_chunking(store):
    store.ingest(lecture("line one  \r\nline two\n\n\n\n\nline three"))
    docs = store.load_documents("cs101")
    assert docs[0].body == "line one\nline two\n\nline three"


def test_material_counts_and_titles(store):
    store.ingest(lecture("Lecture body one.", "lec1"))
    store.ingest(lecture("Lecture body two.", "lec2"))
    store.ingest(
        SourceDocument("hw1", "cs101", MaterialType.Assignment, "HW 1", "Do the thing.")
    )
    assert store.material_counts("cs101") == {"Lecture": 2, "Assignment": 1}
    titles = store.document_titles("cs101")
    assert titles["hw1"] == "HW 1"


def test_custom_chunking_policy_respected(store):
    body = " ".join(f"w{i}" for i in range(40))
    report = store.ingest(lecture(body), policy=ChunkingPolicy(10, 2))
    assert report.chunks_written > 1
    assert all(c.token_count <= 10 for c in store.load_chunks("cs101"))
