"""Question answering pipeline: classify intent, retrieve, generate, guard.

Assignment answers pass through a solution guard (heuristic OR model judge,
failing closed) and are rewritten into hints until clean; after max_rewrites
the pre-verified refusal template ships instead. Degraded dependencies
(embedder down, decomposition unparseable, zero retrieval hits) reduce answer
quality but never block an answer.
"""

from __future__ import annotations

import logging
import re
import threading
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Optional, Sequence

from .errors import (
    AnswerUnavailable,
    EmptyCorpus,
    EmptyQuestion,
    ProviderError,
    UnknownCourse,
)
from .gateway import ChatMessage, CompletionRequest, Gateway, Role
from .ingest import MaterialChunk, tokenize
from .retrieval import (
    RetrievalEngine,
    RetrievalQuery,
    RetrievalSet,
    policy_for,
)

logger = logging.getLogger(__name__)

NO_SOURCE_NOTICE = (
    "Note: I couldn't find matching course materials for this question, "
    "so the guidance below is general rather than course-specific.\n\n"
)


class IntentCategory(str, Enum):
    Lecture = "Lecture"
    Assignment = "Assignment"
    ExamPrep = "ExamPrep"


class IntentSource(str, Enum):
    Model = "Model"
    KeywordFallback = "KeywordFallback"


class Route(str, Enum):
    LectureRAG = "LectureRAG"
    ExamPrepDecompose = "ExamPrepDecompose"
    AssignmentGuarded = "AssignmentGuarded"


ROUTE_BY_CATEGORY = {
    IntentCategory.Lecture: Route.LectureRAG,
    IntentCategory.ExamPrep: Route.ExamPrepDecompose,
    IntentCategory.Assignment: Route.AssignmentGuarded,
}


class JudgeSource(str, Enum):
    Model = "Model"
    Heuristic = "Heuristic"
    Both = "Both"


@dataclass(frozen=True)
class Intent:
    category: IntentCategory
    confidence: float
    source: IntentSource

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must be within [0, 1]")


@dataclass(frozen=True)
class SubQuestion:
    text: str
    index: int
    retrieval: Optional[RetrievalSet] = None


@dataclass(frozen=True)
class GuardEvidence:
    span_start: int
    span_end: int
    reason: str


@dataclass(frozen=True)
class GuardVerdict:
    contains_solution: bool
    evidence: tuple[GuardEvidence, ...]
    judge_source: JudgeSource

    def __post_init__(self) -> None:
        if self.contains_solution and not self.evidence:
            raise ValueError("a positive verdict requires evidence")


@dataclass(frozen=True)
class TutorAnswer:
    text: str
    intent: Intent
    route: Route
    citations: tuple[str, ...]  # chunk_ids, always a subset of what was retrieved
    guard_trail: tuple[GuardVerdict, ...]
    rewrites_applied: int
    fallback_used: bool


@dataclass(frozen=True)
class Turn:
    role: str  # "user" | "assistant"
    text: str
    meta: Optional[dict] = None


class InMemorySession:
    def __init__(self, session_id: str, course_id: str):
        self.session_id = session_id
        self.course_id = course_id
        self.turns: list[Turn] = []
        self.lock = threading.RLock()

    def recent(self, n: int) -> list[Turn]:
        return self.turns[-n:] if n > 0 else []

    def append(self, turn: Turn) -> None:
        self.turns.append(turn)


@dataclass(frozen=True)
class PipelineConfig:
    chat_model: str = "tutor-chat"
    temperature: float = 0.0
    max_tokens: int = 1024
    max_subquestions: int = 5
    context_chunk_cap: int = 12
    max_rewrites: int = 2
    conversation_window: int = 6
    min_solution_lines: int = 3
    code_overlap_threshold: float = 0.5


# -- prompt templates --------------------------------------------------------

_PLACEHOLDER_RE = re.compile(r"\{(question|context|transcript|answer|max_subquestions)\}")


@lru_cache(maxsize=None)
def load_prompt(stage: str) -> str:
    """Prompt templates are versioned files shipped with the package."""
    return (resources.files("coursetutor") / "prompts" / f"{stage}.txt").read_text(
        encoding="utf-8"
    )


def render_prompt(template: str, **values: object) -> str:
    """Substitute known {name} placeholders; anything else stays literal."""
    return _PLACEHOLDER_RE.sub(
        lambda m: str(values[m.group(1)]) if m.group(1) in values else m.group(0),
        template,
    )


def refusal_text() -> str:
    return load_prompt("refusal")


def render_transcript(turns: Sequence[Turn]) -> str:
    if not turns:
        return "(no prior conversation)"
    names = {"user": "Student", "assistant": "Tutor"}
    return "\n".join(f"{names.get(t.role, t.role)}: {t.text}" for t in turns)


# -- intent keyword fallback ---------------------------------------------------

_KEYWORD_RULES: tuple[tuple[IntentCategory, re.Pattern], ...] = (
    (
        IntentCategory.Assignment,
        re.compile(r"\b(?:homework|assignment|exercise)\b|\bproblem\s+\d+\b", re.I),
    ),
    (IntentCategory.ExamPrep, re.compile(r"\b(?:exam|midterm|final|study)\b", re.I)),
)

_NUMBERED_ITEM_RE = re.compile(r"^\s*\d+\s*[.)]\s*(\S.*?)\s*$", re.M)


def keyword_intent(question: str) -> IntentCategory:
    for category, pattern in _KEYWORD_RULES:
        if pattern.search(question):
            return category
    return IntentCategory.Lecture


def parse_intent_label(text: str) -> Optional[IntentCategory]:
    """Case-insensitive parse; accepts the label alone or embedded, but
    refuses ambiguous output naming more than one category."""
    squashed = re.sub(r"[^a-z]", "", text.lower())
    found = [
        category
        for category, token in (
            (IntentCategory.Lecture, "lecture"),
            (IntentCategory.Assignment, "assignment"),
            (IntentCategory.ExamPrep, "examprep"),
        )
        if token in squashed
    ]
    return found[0] if len(found) == 1 else None


# -- solution guard heuristics -------------------------------------------------

@dataclass(frozen=True)
class CodeBlock:
    start: int
    end: int
    line_count: int
    text: str
    kind: str  # "fenced" | "indented"


_FENCED_RE = re.compile(r"```[^\n]*\n(.*?)(?:```|\Z)", re.S)
_INDENTED_LINE_RE = re.compile(r"^(?: {4,}|\t)\S")


def find_code_blocks(text: str) -> list[CodeBlock]:
    blocks = [
        CodeBlock(
            start=m.start(),
            end=m.end(),
            line_count=sum(1 for line in m.group(1).split("\n") if line.strip()),
            text=m.group(1),
            kind="fenced",
        )
        for m in _FENCED_RE.finditer(text)
    ]
    # indented code: runs of consecutive lines starting with a tab or 4 spaces
    offset = 0
    run: list[tuple[int, str]] = []
    for line in text.split("\n"):
        if _INDENTED_LINE_RE.match(line):
            run.append((offset, line))
        elif run:
            blocks.append(_run_block(run))
            run = []
        offset += len(line) + 1
    if run:
        blocks.append(_run_block(run))
    blocks.sort(key=lambda b: b.start)
    return blocks


def _run_block(run: list[tuple[int, str]]) -> CodeBlock:
    start = run[0][0]
    end = run[-1][0] + len(run[-1][1])
    return CodeBlock(
        start=start,
        end=end,
        line_count=len(run),
        text="\n".join(line for _, line in run),
        kind="indented",
    )


def identifier_tokens(text: str) -> set[str]:
    return {t for t in tokenize(text) if any(c.isalpha() for c in t)}


def jaccard(a: set[str], b: set[str]) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


# -- pipeline ------------------------------------------------------------------

class TutorPipeline:
    def __init__(
        self,
        engine: RetrievalEngine,
        gateway: Gateway,
        config: Optional[PipelineConfig] = None,
    ):
        self.engine = engine
        self.gateway = gateway
        self.config = config or PipelineConfig()

    # -- completion plumbing --

    def _complete(self, tag: str, system: str, user: str) -> str:
        request = CompletionRequest(
            messages=(
                ChatMessage(Role.System, system),
                ChatMessage(Role.User, user),
            ),
            model_id=self.config.chat_model,
            tag=tag,
            temperature=self.config.temperature,
            max_tokens=self.config.max_tokens,
        )
        return self.gateway.complete(request).text

    # -- stages --

    def classify_intent(self, question: str, transcript: Sequence[Turn] = ()) -> Intent:
        if not question.strip():
            raise EmptyQuestion("question text is empty")
        system = render_prompt(
            load_prompt("intent"), transcript=render_transcript(transcript)
        )
        try:
            raw = self._complete("intent", system, question)
            category = parse_intent_label(raw)
        except ProviderError:
            category = None
        if category is not None:
            return Intent(category, confidence=1.0, source=IntentSource.Model)
        return Intent(
            keyword_intent(question), confidence=0.5, source=IntentSource.KeywordFallback
        )

    def decompose_question(
        self, question: str, transcript: Sequence[Turn] = ()
    ) -> list[SubQuestion]:
        """Split an exam-prep question into sub-questions; on parse failure or
        provider failure the original question is the single sub-question."""
        system = render_prompt(
            load_prompt("decompose"),
            transcript=render_transcript(transcript),
            max_subquestions=self.config.max_subquestions,
        )
        try:
            raw = self._complete("decompose", system, question)
        except ProviderError:
            logger.warning("decomposition unavailable; using the question as-is")
            return [SubQuestion(question, 0)]
        items = _NUMBERED_ITEM_RE.findall(raw)[: self.config.max_subquestions]
        if not items:
            return [SubQuestion(question, 0)]
        return [SubQuestion(text, i) for i, text in enumerate(items)]

    def detect_solution(
        self,
        answer_text: str,
        assignment_context: str,
        transcript: Sequence[Turn] = (),
    ) -> GuardVerdict:
        """OR of two detectors. The model judge fails closed: if it cannot be
        reached or parsed, the answer is treated as containing a solution."""
        handout_tokens = identifier_tokens(assignment_context)
        evidence: list[GuardEvidence] = []
        for block in find_code_blocks(answer_text):
            if block.line_count >= self.config.min_solution_lines:
                evidence.append(
                    GuardEvidence(
                        block.start,
                        block.end,
                        f"{block.kind} code block of {block.line_count} lines",
                    )
                )
            else:
                overlap = jaccard(identifier_tokens(block.text), handout_tokens)
                if overlap >= self.config.code_overlap_threshold:
                    evidence.append(
                        GuardEvidence(
                            block.start,
                            block.end,
                            f"{block.kind} code block overlaps assignment identifiers "
                            f"(jaccard={overlap:.2f})",
                        )
                    )
        heuristic_flag = bool(evidence)

        system = render_prompt(
            load_prompt("detect"),
            context=assignment_context or "(no assignment excerpts retrieved)",
            transcript=render_transcript(transcript),
            answer=answer_text,
        )
        judge_flag: Optional[bool] = None
        try:
            raw = self._complete("detect", system, answer_text).strip().lower()
            if raw.startswith("yes"):
                judge_flag = True
            elif raw.startswith("no"):
                judge_flag = False
        except ProviderError:
            judge_flag = None
        if judge_flag is None:
            evidence.append(
                GuardEvidence(
                    0, len(answer_text), "judge unavailable or unparseable; failing closed"
                )
            )
            judge_flag = True
        elif judge_flag:
            evidence.append(
                GuardEvidence(0, len(answer_text), "model judge flagged solution content")
            )

        contains = heuristic_flag or judge_flag
        if heuristic_flag and judge_flag:
            source = JudgeSource.Both
        elif heuristic_flag:
            source = JudgeSource.Heuristic
        elif judge_flag:
            source = JudgeSource.Model
        else:
            source = JudgeSource.Both  # both detectors agreed the draft is clean
        return GuardVerdict(
            contains_solution=contains,
            evidence=tuple(evidence if contains else ()),
            judge_source=source,
        )

    def rewrite_to_hints(
        self,
        answer_text: str,
        question: str,
        verdict: GuardVerdict,
        transcript: Sequence[Turn] = (),
    ) -> str:
        if not verdict.contains_solution:
            raise ValueError("rewrite_to_hints requires a positive guard verdict")
        system = render_prompt(
            load_prompt("rewrite"),
            question=question,
            transcript=render_transcript(transcript),
            answer=answer_text,
        )
        return self._complete("rewrite", system, answer_text)

    # -- retrieval helpers --

    def _search(
        self, question: str, course_id: str, category: IntentCategory
    ) -> tuple[list[RetrievalSet], list[SubQuestion]]:
        """Retrieval per the category's policy. Returns the per-sub-question
        retrieval sets (one entry for non-decomposing routes)."""
        policy = policy_for(category.value)
        subs = [SubQuestion(question, 0)]
        results: list[RetrievalSet] = []
        for sub in subs:
            query = RetrievalQuery(
                text=sub.text,
                course_id=course_id,
                k=policy.k,
                material_filter=policy.material_filter,
                channels=policy.channels,
            )
            try:
                results.append(self.engine.hybrid_search(query))
            except EmptyCorpus:
                results.append(RetrievalSet(hits=(), query_echo=query))
        return results, subs

    def _context_chunks(
        self, course_id: str, retrievals: Sequence[RetrievalSet], cap: int
    ) -> list[MaterialChunk]:
        """Concatenate retrieval sets, dedup by chunk_id keeping the max fused
        score, order by score (ties by chunk_id), cap the total."""
        best: dict[str, float] = {}
        for retrieval in retrievals:
            for hit in retrieval.hits:
                if hit.chunk_id not in best or hit.fused_score > best[hit.chunk_id]:
                    best[hit.chunk_id] = hit.fused_score
        ranked = sorted(best.items(), key=lambda item: (-item[1], item[0]))[:cap]
        snapshot = self.engine.snapshot(course_id)
        return [
            snapshot.chunks[cid] for cid, _ in ranked if cid in snapshot.chunks
        ]

    def _format_context(self, course_id: str, chunks: Sequence[MaterialChunk]) -> str:
        if not chunks:
            return "(no matching course material found)"
        titles = self.engine.corpus.document_titles(course_id)
        blocks = []
        for i, chunk in enumerate(chunks, start=1):
            title = titles.get(chunk.doc_id, chunk.doc_id)
            blocks.append(f"[{i}] {title} (part {chunk.seq})\n{chunk.text}")
        return "\n\n".join(blocks)

    def _generate_answer(
        self, question: str, course_id: str, chunks: Sequence[MaterialChunk],
        transcript: Sequence[Turn],
    ) -> str:
        system = render_prompt(
            load_prompt("answer"),
            question=question,
            context=self._format_context(course_id, chunks),
            transcript=render_transcript(transcript),
        )
        try:
            text = self._complete("answer", system, question)
        except ProviderError as exc:
            raise AnswerUnavailable(
                "the tutor could not generate an answer; please retry shortly"
            ) from exc
        if not chunks:
            text = NO_SOURCE_NOTICE + text
        return text

    # -- routes --

    def answer_lecture(
        self, question: str, course_id: str, transcript: Sequence[Turn] = ()
    ) -> TutorAnswer:
        retrievals, _ = self._search(question, course_id, IntentCategory.Lecture)
        chunks = self._context_chunks(
            course_id, retrievals, cap=self.config.context_chunk_cap
        )
        text = self._generate_answer(question, course_id, chunks, transcript)
        return TutorAnswer(
            text=text,
            intent=Intent(IntentCategory.Lecture, 1.0, IntentSource.Model),
            route=Route.LectureRAG,
            citations=tuple(c.chunk_id for c in chunks),
            guard_trail=(),
            rewrites_applied=0,
            fallback_used=False,
        )

    def answer_examprep(
        self, question: str, course_id: str, transcript: Sequence[Turn] = ()
    ) -> TutorAnswer:
        subs = self.decompose_question(question, transcript)
        policy = policy_for(IntentCategory.ExamPrep.value)
        retrievals: list[RetrievalSet] = []
        enriched: list[SubQuestion] = []
        for sub in subs:
            query = RetrievalQuery(
                text=sub.text,
                course_id=course_id,
                k=policy.k,
                material_filter=policy.material_filter,
                channels=policy.channels,
            )
            try:
                result = self.engine.hybrid_search(query)
            except EmptyCorpus:
                result = RetrievalSet(hits=(), query_echo=query)
            retrievals.append(result)
            enriched.append(replace(sub, retrieval=result))
        chunks = self._context_chunks(
            course_id, retrievals, cap=self.config.context_chunk_cap
        )
        text = self._generate_answer(question, course_id, chunks, transcript)
        return TutorAnswer(
            text=text,
            intent=Intent(IntentCategory.ExamPrep, 1.0, IntentSource.Model),
            route=Route.ExamPrepDecompose,
            citations=tuple(c.chunk_id for c in chunks),
            guard_trail=(),
            rewrites_applied=0,
            fallback_used=False,
        )

    def answer_assignment(
        self, question: str, course_id: str, transcript: Sequence[Turn] = ()
    ) -> TutorAnswer:
        retrievals, _ = self._search(question, course_id, IntentCategory.Assignment)
        chunks = self._context_chunks(
            course_id, retrievals, cap=self.config.context_chunk_cap
        )
        # guard overlap checks run against the assignment handout itself when
        # the filter surfaced any, otherwise against everything retrieved
        handout_chunks = [c for c in chunks if c.material_type.value == "Assignment"] or chunks
        assignment_context = "\n\n".join(c.text for c in handout_chunks)

        draft = self._generate_answer(question, course_id, chunks, transcript)
        trail: list[GuardVerdict] = []
        rewrites = 0
        fallback = False
        while True:
            verdict = self.detect_solution(draft, assignment_context, transcript)
            trail.append(verdict)
            if not verdict.contains_solution:
                break
            if rewrites >= self.config.max_rewrites:
                draft, fallback = refusal_text(), True
                trail.append(self._template_verdict())
                break
            try:
                draft = self.rewrite_to_hints(draft, question, verdict, transcript)
            except ProviderError:
                # cannot rewrite safely: ship the refusal, never the flagged draft
                draft, fallback = refusal_text(), True
                trail.append(self._template_verdict())
                break
            rewrites += 1
        return TutorAnswer(
            text=draft,
            intent=Intent(IntentCategory.Assignment, 1.0, IntentSource.Model),
            route=Route.AssignmentGuarded,
            citations=tuple(c.chunk_id for c in chunks),
            guard_trail=tuple(trail),
            rewrites_applied=rewrites,
            fallback_used=fallback,
        )

    @staticmethod
    def _template_verdict() -> GuardVerdict:
        # the refusal template is statically verified code-free
        return GuardVerdict(
            contains_solution=False, evidence=(), judge_source=JudgeSource.Heuristic
        )

    # -- entry point --

    def answer_question(
        self, question: str, course_id: str, session: InMemorySession
    ) -> TutorAnswer:
        """Classify, dispatch, and append the exchange to the session.

        The transcript gains exactly two turns per successful call and none
        when an error is raised.
        """
        if not question.strip():
            raise EmptyQuestion("question text is empty")
        if not self.engine.corpus.has_course(course_id):
            raise UnknownCourse(course_id)
        with session.lock:
            transcript = session.recent(self.config.conversation_window)
            intent = self.classify_intent(question, transcript)
            if intent.category is IntentCategory.Lecture:
                answer = self.answer_lecture(question, course_id, transcript)
            elif intent.category is IntentCategory.ExamPrep:
                answer = self.answer_examprep(question, course_id, transcript)
            else:
                answer = self.answer_assignment(question, course_id, transcript)
            answer = replace(answer, intent=intent)
            session.append(Turn("user", question))
            session.append(
                Turn("assistant", answer.text, meta=self.answer_meta(course_id, answer))
            )
            return answer

    # -- projections --

    def citation_refs(self, course_id: str, answer: TutorAnswer) -> list[dict]:
        """Citations as document title plus chunk seq; guard evidence and raw
        chunk ids stay internal."""
        snapshot = self.engine.snapshot(course_id)
        titles = self.engine.corpus.document_titles(course_id)
        refs = []
        for chunk_id in answer.citations:
            chunk = snapshot.chunks.get(chunk_id)
            if chunk is None:
                continue
            refs.append({"title": titles.get(chunk.doc_id, chunk.doc_id), "seq": chunk.seq})
        return refs

    def answer_meta(self, course_id: str, answer: TutorAnswer) -> dict:
        return {
            "route": answer.route.value,
            "citations": self.citation_refs(course_id, answer),
            "fallback_used": answer.fallback_used,
        }
