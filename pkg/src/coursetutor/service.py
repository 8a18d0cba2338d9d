"""HTTP JSON API over the tutoring runtime.

Projection rule: clients see answer text, route, citations as document title
plus part number, and the fallback flag. Guard evidence spans and raw chunk
ids never leave the server.
"""

from __future__ import annotations

import logging
import os
import secrets
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from fastapi import Depends, FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .config import TutorConfig
from .corpus import COURSE_ID_RE
from .errors import (
    AnswerUnavailable,
    EmptyQuestion,
    ProviderError,
    RejectedDocument,
    UnknownCourse,
)
from .ingest import MaterialType, SourceDocument
from .persistence import DbSession
from .runtime import TutorRuntime

logger = logging.getLogger(__name__)

MAX_BODY_BYTES = 32 * 1024
TRANSCRIPT_TURN_CAP = 50
RETRY_AFTER_SECONDS = 5


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class CourseCreate(BaseModel):
    course_id: str
    title: str


class MaterialIn(BaseModel):
    doc_id: str
    material_type: str
    title: str
    body: str
    origin_uri: Optional[str] = None


class SessionCreate(BaseModel):
    course_id: str


class QuestionIn(BaseModel):
    text: str


def create_app(config: TutorConfig, runtime: Optional[TutorRuntime] = None) -> FastAPI:
    rt = runtime if runtime is not None else TutorRuntime(config)
    token = os.environ.get(config.service_token_env)
    if not token:
        logger.warning(
            "service token env %s is not set; every authenticated request will be rejected",
            config.service_token_env,
        )

    app = FastAPI(title="coursetutor", docs_url=None, redoc_url=None)
    app.state.runtime = rt

    # -- middleware: body cap, UI same-origin proxy --

    @app.middleware("http")
    async def guard_and_proxy(request: Request, call_next):
        path = request.scope.get("path", "")
        if path.startswith("/app/api/v1/"):
            # thin same-origin proxy for the chat UI: rewrite the path and
            # inject the service token so the browser never holds it
            request.scope["path"] = path[len("/app/api"):]
            headers = [
                (k, v)
                for k, v in request.scope["headers"]
                if k.lower() != b"authorization"
            ]
            if token:
                headers.append((b"authorization", f"Bearer {token}".encode()))
            request.scope["headers"] = headers
        body = await request.body()
        if len(body) > MAX_BODY_BYTES:
            return JSONResponse(
                status_code=422,
                content={"detail": f"request body exceeds {MAX_BODY_BYTES} bytes"},
            )
        return await call_next(request)

    # -- error mapping: malformed input is always 4xx, never 5xx --

    @app.exception_handler(RequestValidationError)
    async def on_validation_error(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=422, content={"detail": str(exc.errors()[:3])})

    @app.exception_handler(UnknownCourse)
    async def on_unknown_course(request: Request, exc: UnknownCourse):
        return JSONResponse(status_code=404, content={"detail": f"unknown course: {exc}"})

    @app.exception_handler(RejectedDocument)
    async def on_rejected_document(request: Request, exc: RejectedDocument):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.exception_handler(EmptyQuestion)
    async def on_empty_question(request: Request, exc: EmptyQuestion):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.exception_handler(ValueError)
    async def on_value_error(request: Request, exc: ValueError):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.exception_handler(AnswerUnavailable)
    async def on_answer_unavailable(request: Request, exc: AnswerUnavailable):
        return JSONResponse(
            status_code=503,
            content={"detail": str(exc)},
            headers={"Retry-After": str(RETRY_AFTER_SECONDS)},
        )

    @app.exception_handler(ProviderError)
    async def on_provider_error(request: Request, exc: ProviderError):
        return JSONResponse(
            status_code=503,
            content={"detail": "upstream model provider unavailable"},
            headers={"Retry-After": str(RETRY_AFTER_SECONDS)},
        )

    # -- auth --

    def require_token(request: Request) -> None:
        header = request.headers.get("authorization", "")
        if not token or header != f"Bearer {token}":
            raise _Unauthorized()

    class _Unauthorized(Exception):
        pass

    @app.exception_handler(_Unauthorized)
    async def on_unauthorized(request: Request, exc: _Unauthorized):
        return JSONResponse(status_code=401, content={"detail": "missing or invalid bearer token"})

    # -- projections --

    def course_view(course_id: str) -> dict:
        row = rt.db.get_course(course_id)
        if row is None:
            raise UnknownCourse(course_id)
        return {
            "course_id": row.course_id,
            "title": row.title,
            "created_at": row.created_at,
            "material_counts": rt.corpus.material_counts(row.course_id),
        }

    def session_view(session_id: str) -> dict:
        row = rt.db.get_session(session_id)
        if row is None:
            raise _NotFound(f"unknown session: {session_id}")
        turns = rt.db.transcript(session_id, last=TRANSCRIPT_TURN_CAP)
        transcript = []
        for turn in turns:
            item = {"role": turn.role, "text": turn.text}
            if turn.role == "assistant" and turn.meta:
                item["answer_meta"] = turn.meta
            transcript.append(item)
        return {
            "session_id": row.session_id,
            "course_id": row.course_id,
            "created_at": row.created_at,
            "transcript": transcript,
        }

    class _NotFound(Exception):
        pass

    @app.exception_handler(_NotFound)
    async def on_not_found(request: Request, exc: _NotFound):
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    # -- endpoints --

    @app.get("/v1/healthz")
    def healthz() -> dict:
        corpus_loaded = any(
            (rt.corpus.course_dir(c) / "chunks.jsonl").exists()
            for c in rt.corpus.list_courses()
        )
        return {
            "status": "ok",
            "corpus_loaded": corpus_loaded,
            "provider": rt.provider.provider_id,
        }

    @app.post("/v1/courses", status_code=201, dependencies=[Depends(require_token)])
    def create_course(payload: CourseCreate):
        if not COURSE_ID_RE.match(payload.course_id):
            raise ValueError("course_id must match [a-z0-9-]{1,64}")
        if not rt.db.create_course(payload.course_id, payload.title, _now()):
            return JSONResponse(
                status_code=409,
                content={"detail": f"course already exists: {payload.course_id}"},
            )
        rt.corpus.create_course(payload.course_id)
        return course_view(payload.course_id)

    @app.get("/v1/courses", dependencies=[Depends(require_token)])
    def list_courses() -> list[dict]:
        return [course_view(row.course_id) for row in rt.db.list_courses()]

    @app.post(
        "/v1/courses/{course_id}/materials",
        status_code=202,
        dependencies=[Depends(require_token)],
    )
    def add_material(course_id: str, payload: MaterialIn):
        if rt.db.get_course(course_id) is None:
            raise UnknownCourse(course_id)
        try:
            material_type = MaterialType(payload.material_type)
        except ValueError:
            raise RejectedDocument(
                f"material_type must be one of {[m.value for m in MaterialType]}"
            ) from None
        report = rt.corpus.ingest(
            SourceDocument(
                doc_id=payload.doc_id,
                course_id=course_id,
                material_type=material_type,
                title=payload.title,
                body=payload.body,
                origin_uri=payload.origin_uri,
            )
        )
        rt.engine.refresh(course_id)
        return {
            "doc_id": report.doc_id,
            "course_id": report.course_id,
            "chunks_written": report.chunks_written,
            "tokens_indexed": report.tokens_indexed,
            "replaced": report.replaced,
        }

    @app.post("/v1/sessions", status_code=201, dependencies=[Depends(require_token)])
    def create_session(payload: SessionCreate):
        if rt.db.get_course(payload.course_id) is None:
            raise UnknownCourse(payload.course_id)
        session_id = secrets.token_urlsafe(16)  # 128 bits
        rt.db.create_session(session_id, payload.course_id, _now())
        return session_view(session_id)

    @app.get("/v1/sessions/{session_id}", dependencies=[Depends(require_token)])
    def get_session(session_id: str):
        return session_view(session_id)

    @app.post(
        "/v1/sessions/{session_id}/questions", dependencies=[Depends(require_token)]
    )
    def ask_question(session_id: str, payload: QuestionIn):
        row = rt.db.get_session(session_id)
        if row is None:
            raise _NotFound(f"unknown session: {session_id}")
        if not payload.text.strip():
            raise EmptyQuestion("question text is empty")
        session = DbSession(
            rt.db, session_id, row.course_id, rt.session_locks.get(session_id)
        )
        answer = rt.pipeline.answer_question(payload.text, row.course_id, session)
        return {
            "answer": {
                "text": answer.text,
                "route": answer.route.value,
                "citations": rt.pipeline.citation_refs(row.course_id, answer),
                "fallback_used": answer.fallback_used,
            }
        }

    # -- static chat UI --

    ui_dir = config.ui_dir
    if ui_dir is None:
        bundled = Path(__file__).resolve().parent.parent.parent / "frontend" / "dist"
        ui_dir = bundled if bundled.is_dir() else None
    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/app", StaticFiles(directory=str(ui_dir), html=True), name="app")

    return app
