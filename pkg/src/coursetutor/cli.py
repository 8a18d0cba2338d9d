"""Operator command line: ingest, ask, serve, index, course, eval."""

from __future__ import annotations

import functools
import json
import logging
import sys
import uuid
from pathlib import Path
from typing import Optional

import click

from . import evalharness
from .config import ENV_API_KEY, TutorConfig, load_config
from .corpus import COURSE_ID_RE
from .errors import (
    AnswerUnavailable,
    DuplicateId,
    EmptyCorpus,
    EmptyQuestion,
    InvalidScore,
    ParseError,
    ProviderError,
    RejectedDocument,
    UnknownCourse,
)
from .gateway import ChatMessage, CompletionRequest, Role
from .ingest import MaterialType, SourceDocument
from .pipeline import InMemorySession
from .runtime import TutorRuntime

# Exit code contract: 0 ok, 1 user error, 2 infrastructure. Click's default
# usage-error code is 2, which would collide with the infra bucket.
click.UsageError.exit_code = 1

_USER_ERRORS = (
    UnknownCourse,
    RejectedDocument,
    EmptyQuestion,
    EmptyCorpus,
    ParseError,
    DuplicateId,
    InvalidScore,
    FileNotFoundError,
    ValueError,
)
_INFRA_ERRORS = (AnswerUnavailable, ProviderError, OSError)


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except _USER_ERRORS as exc:
            raise click.ClickException(str(exc)) from None
        except _INFRA_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)

    return wrapper


def _emit(payload: dict) -> None:
    click.echo(json.dumps(payload, ensure_ascii=False))


def _load(config_path: Optional[Path], data_dir: Optional[Path]) -> TutorConfig:
    config = load_config(config_path)
    if data_dir is not None:
        from dataclasses import replace

        config = replace(config, data_dir=data_dir)
    return config


config_option = click.option(
    "--config", "config_path", type=click.Path(path_type=Path), default=None,
    help="Path to tutor.toml.",
)
data_dir_option = click.option(
    "--data-dir", type=click.Path(path_type=Path), default=None,
    help="Override the data directory.",
)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log at INFO instead of WARNING.")
def main(verbose: bool) -> None:
    """Course tutoring service tools."""
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.group()
def course() -> None:
    """Course registry."""


@course.command("create")
@click.option("--course", "course_id", required=True)
@click.option("--title", default="")
@config_option
@data_dir_option
@guarded
def course_create(course_id: str, title: str, config_path, data_dir) -> None:
    if not COURSE_ID_RE.match(course_id):
        raise click.ClickException(
            "course id must be 1-64 chars of lowercase letters, digits, or hyphens"
        )
    runtime = TutorRuntime(_load(config_path, data_dir))
    try:
        created = runtime.db.create_course(course_id, title or course_id)
        runtime.corpus.create_course(course_id)
        _emit({"course_id": course_id, "created": created})
    finally:
        runtime.close()


@main.command()
@click.option("--course", "course_id", required=True)
@click.option("--file", "file_path", required=True, type=click.Path(path_type=Path))
@click.option(
    "--type", "material_type",
    type=click.Choice(["lecture", "assignment", "syllabus", "other"]),
    default="lecture", show_default=True,
)
@click.option("--title", default=None, help="Defaults to the file stem.")
@click.option("--doc-id", default=None, help="Defaults to the file stem.")
@config_option
@data_dir_option
@guarded
def ingest(course_id, file_path, material_type, title, doc_id, config_path, data_dir):
    """Ingest one document and refresh the course index."""
    runtime = TutorRuntime(_load(config_path, data_dir))
    try:
        if not runtime.corpus.has_course(course_id):
            raise UnknownCourse(course_id)
        body = Path(file_path).read_text(encoding="utf-8")
        doc = SourceDocument(
            doc_id=doc_id or Path(file_path).stem,
            course_id=course_id,
            material_type=MaterialType(material_type.capitalize()),
            title=title or Path(file_path).stem,
            body=body,
        )
        report = runtime.corpus.ingest(doc)
        runtime.engine.refresh(course_id)
        _emit(
            {
                "doc_id": report.doc_id,
                "course_id": report.course_id,
                "chunks_written": report.chunks_written,
                "tokens_indexed": report.tokens_indexed,
                "replaced": report.replaced,
            }
        )
    finally:
        runtime.close()


def _answer_projection(runtime: TutorRuntime, course_id: str, answer) -> dict:
    return {
        "text": answer.text,
        "intent": {
            "category": answer.intent.category.value,
            "confidence": answer.intent.confidence,
            "source": answer.intent.source.value,
        },
        "route": answer.route.value,
        "citations": runtime.pipeline.citation_refs(course_id, answer),
        "guard_trail": [
            {
                "contains_solution": verdict.contains_solution,
                "judge_source": verdict.judge_source.value,
                "evidence": [
                    {"span": [e.span_start, e.span_end], "reason": e.reason}
                    for e in verdict.evidence
                ],
            }
            for verdict in answer.guard_trail
        ],
        "rewrites_applied": answer.rewrites_applied,
        "fallback_used": answer.fallback_used,
    }


@main.command()
@click.option("--course", "course_id", required=True)
@click.option("--question", required=True)
@click.option("--json", "as_json", is_flag=True, help="Emit the full answer as JSON.")
@click.option("--mock-script", type=click.Path(path_type=Path), default=None)
@config_option
@data_dir_option
@guarded
def ask(course_id, question, as_json, mock_script, config_path, data_dir):
    """One-shot question against a course (ephemeral session)."""
    config = _load(config_path, data_dir)
    runtime = TutorRuntime(config, mock_script=str(mock_script) if mock_script else None)
    try:
        session = InMemorySession(f"cli-{uuid.uuid4().hex[:8]}", course_id)
        answer = runtime.pipeline.answer_question(question, course_id, session)
        if as_json:
            _emit(_answer_projection(runtime, course_id, answer))
        else:
            click.echo(answer.text)
    finally:
        runtime.close()


@main.group()
def index() -> None:
    """Retrieval index maintenance."""


@index.command("rebuild")
@click.option("--course", "course_id", required=True)
@config_option
@data_dir_option
@guarded
def index_rebuild(course_id, config_path, data_dir):
    """Re-embed every chunk and rebuild the retrieval snapshot."""
    runtime = TutorRuntime(_load(config_path, data_dir))
    try:
        snapshot = runtime.engine.refresh(course_id, force_embed=True)
        _emit(
            {
                "course_id": course_id,
                "chunks": len(snapshot.chunks),
                "embedder_id": runtime.gateway.embedder_id,
            }
        )
    finally:
        runtime.close()


@main.command()
@config_option
@guarded
def serve(config_path):
    """Run the HTTP service until signaled; in-flight requests drain."""
    import uvicorn

    from .service import create_app

    config = load_config(config_path if config_path else Path("tutor.toml"))
    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")


# -- eval ------------------------------------------------------------------------

BASELINE_SYSTEM_PROMPT = "You are a helpful assistant."


@main.group()
def eval() -> None:
    """Answer generation, rating sheets, and score aggregation."""


@eval.command("generate")
@click.option("--dataset", required=True, type=click.Path(path_type=Path))
@click.option("--course", "course_id", required=True,
              help="Course whose materials ground the pipeline answers.")
@click.option("--out", "out_path", type=click.Path(path_type=Path),
              default=Path("answers.jsonl"), show_default=True)
@click.option("--runs", default=2, show_default=True)
@click.option("--concurrency", default=4, show_default=True)
@click.option("--pipeline-url", default=None,
              help="Tutor service base URL; omit to answer in-process.")
@click.option("--baseline-url", default=None,
              help="Bare chat-completions base URL; omit to use the configured provider.")
@click.option("--baseline-model", default=None)
@click.option("--mock-script", type=click.Path(path_type=Path), default=None)
@config_option
@data_dir_option
@guarded
def eval_generate(dataset, course_id, out_path, runs, concurrency, pipeline_url,
                  baseline_url, baseline_model, mock_script, config_path, data_dir):
    """Produce both systems' answers, two runs each, resumably."""
    import os

    records = evalharness.load_dataset(dataset)
    config = _load(config_path, data_dir)
    answerers: dict = {}

    if pipeline_url:
        import httpx

        token = os.environ.get(config.service_token_env, "")
        if not token:
            raise click.ClickException(
                f"{config.service_token_env} must be set to reach the service"
            )
        client = httpx.Client(timeout=60.0)
        answerers[evalharness.SystemName.Pipeline] = evalharness.PipelineAnswerer(
            client, course_id, token, base=pipeline_url
        )
        runtime = None
    else:
        runtime = TutorRuntime(
            config, mock_script=str(mock_script) if mock_script else None
        )
        if not runtime.corpus.has_course(course_id):
            raise UnknownCourse(course_id)

        def pipeline_answer(record, run_index):
            session = InMemorySession(
                f"eval-{record.qa_id}-{run_index}", course_id
            )
            answer = runtime.pipeline.answer_question(
                record.question, course_id, session
            )
            return answer.text, answer.route.value

        answerers[evalharness.SystemName.Pipeline] = pipeline_answer

    if baseline_url:
        import httpx

        answerers[evalharness.SystemName.Baseline] = evalharness.BaselineAnswerer(
            httpx.Client(timeout=60.0),
            baseline_model or config.provider.chat_model,
            base=baseline_url,
            api_key=os.environ.get(ENV_API_KEY, ""),
        )
    elif runtime is not None:

        def baseline_answer(record, run_index):
            # the baseline sees the bare question, no course context
            request = CompletionRequest(
                messages=(
                    ChatMessage(Role.System, BASELINE_SYSTEM_PROMPT),
                    ChatMessage(Role.User, record.question),
                ),
                model_id=baseline_model or config.provider.chat_model,
                tag="baseline",
            )
            return runtime.gateway.complete(request).text, None

        answerers[evalharness.SystemName.Baseline] = baseline_answer

    try:
        answers = evalharness.generate(
            records, answerers, out_path, runs=runs, concurrency=concurrency
        )
    finally:
        if runtime is not None:
            runtime.close()
    failed = sum(1 for a in answers if a.error)
    _emit({"answers": len(answers), "failed": failed, "out": str(out_path)})


@eval.command("sheets")
@click.option("--dataset", required=True, type=click.Path(path_type=Path))
@click.option("--answers", "answers_path", required=True, type=click.Path(path_type=Path))
@click.option("--out-dir", type=click.Path(path_type=Path),
              default=Path("sheets"), show_default=True)
@click.option("--passes", default=1, show_default=True,
              help="Number of rater sheets to emit.")
@click.option("--seed", type=int, default=None, help="Shuffle seed (for reproducible sheets).")
@guarded
def eval_sheets(dataset, answers_path, out_dir, passes, seed):
    """Emit blinded rating sheets plus the unblinding key."""
    records = evalharness.load_dataset(dataset)
    answers = evalharness.load_answers(answers_path)
    sheet_paths, key_path = evalharness.emit_rating_sheets(
        records, answers, out_dir, passes=passes, seed=seed
    )
    _emit({"sheets": [str(p) for p in sheet_paths], "blinding_key": str(key_path)})


@eval.command("aggregate")
@click.option("--sheets", "sheets_dir", required=True, type=click.Path(path_type=Path),
              help="Directory of filled-in rating sheet CSVs.")
@click.option("--key", "key_path", required=True, type=click.Path(path_type=Path))
@click.option("--out-json", type=click.Path(path_type=Path),
              default=Path("report.json"), show_default=True)
@click.option("--out-md", type=click.Path(path_type=Path),
              default=Path("report.md"), show_default=True)
@guarded
def eval_aggregate(sheets_dir, key_path, out_json, out_md):
    """Unblind scored sheets and write the score report."""
    sheet_paths = sorted(Path(sheets_dir).glob("*.csv"))
    if not sheet_paths:
        raise click.ClickException(f"no CSV sheets found under {sheets_dir}")
    scores = evalharness.parse_scored_sheets(sheet_paths, key_path)
    report = evalharness.aggregate(scores)
    evalharness.write_report(report, out_json, out_md)
    for warning in report.warnings:
        click.echo(f"warning: {warning}", err=True)
    _emit({"report_json": str(out_json), "report_md": str(out_md),
           "display": report.display})


if __name__ == "__main__":
    main()
