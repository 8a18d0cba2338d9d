"""Shared fixtures: a small three-document course and a pipeline builder."""

import pytest

from coursetutor.corpus import CorpusStore
from coursetutor.gateway import FallbackEmbedder, Gateway, MockProvider
from coursetutor.ingest import MaterialType, SourceDocument
from coursetutor.pipeline import PipelineConfig, TutorPipeline
from coursetutor.retrieval import RetrievalEngine

LECTURE_BODY = """\
Merge sort splits an array in half, sorts each half recursively, and merges
the two sorted halves. Its running time is O(n log n) in every case.

A binary heap is a complete binary tree stored in an array. The parent of the
node at index i sits at index (i - 1) // 2, so no pointers are needed.

Stability matters when sorting records by several keys in passes. Merge sort
is stable; heapsort is not.
"""

ASSIGNMENT_BODY = """\
Problem 3: implement merge sort for linked lists. Submit a function named
merge_sort_list that accepts the head node and returns the new head.

Grading: correctness 70 percent, asymptotic analysis 30 percent.
"""

SYLLABUS_BODY = """\
The midterm exam covers sorting algorithms, binary heaps, and asymptotic
analysis. It is scheduled for week seven.

Office hours run Tuesdays and Thursdays in the lab.
"""


@pytest.fixture
def algo_corpus(tmp_path):
    corpus = CorpusStore(tmp_path / "courses")
    corpus.create_course("algo")
    corpus.ingest(
        SourceDocument("lec-sorting", "algo", MaterialType.Lecture,
                       "Sorting and Heaps", LECTURE_BODY)
    )
    corpus.ingest(
        SourceDocument("hw2", "algo", MaterialType.Assignment,
                       "Homework 2", ASSIGNMENT_BODY)
    )
    corpus.ingest(
        SourceDocument("syllabus", "algo", MaterialType.Syllabus,
                       "Course Syllabus", SYLLABUS_BODY)
    )
    return corpus


@pytest.fixture
def make_pipeline(algo_corpus):
    """Builds a pipeline over the fixture corpus with a scripted provider.

    Script keys should be request tags ("intent", "decompose", "answer",
    "detect", "rewrite"); exact tag matches win, so substring collisions
    with prompt text cannot occur.
    """

    def build(script, config=None):
        provider = MockProvider(script)
        gateway = Gateway(provider, FallbackEmbedder(16), sleep=lambda s: None)
        engine = RetrievalEngine(algo_corpus, gateway)
        return TutorPipeline(engine, gateway, config or PipelineConfig())

    return build
