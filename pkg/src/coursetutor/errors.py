"""Domain error types shared across modules."""

from __future__ import annotations


class TutorError(Exception):
    """Base class for all domain errors raised by this package."""


# -- corpus / ingestion ------------------------------------------------------

class RejectedDocument(TutorError):
    """Document cannot be ingested (empty body, no indexable tokens, bad fields)."""


class UnknownCourse(TutorError):
    """Operation referenced a course_id that does not exist."""


# -- retrieval ---------------------------------------------------------------

class EmptyQuery(TutorError):
    """Query text contains no usable content."""


class EmptyCorpus(TutorError):
    """Course has no ingested chunks to search."""


class UnknownChunk(TutorError):
    """chunk_id not present in the index or vector store."""


class DimensionMismatch(TutorError):
    """Vector dimensionality differs from the store's fixed dimension."""


# -- llm gateway -------------------------------------------------------------

class ProviderError(TutorError):
    """Base class for completion/embedding provider failures."""


class ProviderTimeout(ProviderError):
    """Provider did not respond within the configured timeout. Retryable."""


class ProviderRejected(ProviderError):
    """Provider refused the request. Not retryable."""


class RetriesExhausted(ProviderError):
    """All retry attempts failed on transient errors."""


class TransientProviderError(ProviderError):
    """Retryable transport-level failure (connection reset, 5xx, ...)."""


class MockScriptExhausted(ProviderRejected):
    """Scripted mock provider ran out of responses for a matcher."""


# -- pipeline ----------------------------------------------------------------

class EmptyQuestion(TutorError):
    """Question text is empty or whitespace-only."""


class AnswerUnavailable(TutorError):
    """Answer generation failed in a way that is safe to show to the user."""


# -- evaluation --------------------------------------------------------------

class ParseError(TutorError):
    """A dataset line is not valid JSON or is missing required fields."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DuplicateId(TutorError):
    """Two dataset records share a qa_id."""

    def __init__(self, qa_id: str):
        super().__init__(f"duplicate qa_id: {qa_id}")
        self.qa_id = qa_id


class InvalidScore(TutorError):
    """Rubric score outside the allowed {0, 0.5, 1} values."""
