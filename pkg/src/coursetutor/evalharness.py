"""Blinded human-rating evaluation: dataset, generation, sheets, aggregation.

Scoring is deliberately human: the harness produces rating sheets and
aggregates filled-in scores. It never scores answers automatically.
"""

from __future__ import annotations

import csv
import json
import logging
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

from .errors import DuplicateId, InvalidScore, ParseError

logger = logging.getLogger(__name__)

CRITERIA = ("Usefulness", "Accuracy", "Appropriateness")
VALID_SCORES = (0.0, 0.5, 1.0)


class EvalCategory(str, Enum):
    Homework = "Homework"
    Conceptual = "Conceptual"


class SystemName(str, Enum):
    Pipeline = "Pipeline"
    Baseline = "Baseline"


@dataclass(frozen=True)
class EvalRecord:
    qa_id: str
    question: str
    reference_answer: str
    category: EvalCategory


@dataclass(frozen=True)
class GeneratedAnswer:
    qa_id: str
    system: SystemName
    run_index: int  # 1-based
    text: str
    timing_ms: float
    route: Optional[str] = None  # pipeline answers only
    error: Optional[str] = None


@dataclass(frozen=True)
class RubricScore:
    qa_id: str
    system: SystemName
    criterion: str
    run_index: int
    score: float
    rater_id: str

    def __post_init__(self) -> None:
        if self.score not in VALID_SCORES:
            raise InvalidScore(f"score must be one of {VALID_SCORES}, got {self.score}")
        if self.criterion not in CRITERIA:
            raise InvalidScore(f"unknown criterion: {self.criterion}")


# -- dataset -------------------------------------------------------------------

def load_dataset(path: Path | str) -> list[EvalRecord]:
    """Read the JSONL dataset; returns [] (with a warning) for an empty file."""
    records: list[EvalRecord] = []
    seen: set[str] = set()
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON: {exc.msg}") from None
            try:
                record = EvalRecord(
                    qa_id=raw["qa_id"],
                    question=raw["question"],
                    reference_answer=raw["reference_answer"],
                    category=EvalCategory(raw["category"]),
                )
            except KeyError as exc:
                raise ParseError(line_no, f"missing field {exc}") from None
            except ValueError as exc:
                raise ParseError(line_no, str(exc)) from None
            if record.qa_id in seen:
                raise DuplicateId(record.qa_id)
            seen.add(record.qa_id)
            records.append(record)
    if not records:
        logger.warning("dataset %s is empty", path)
    return records


def convert_external_dataset(path: Path | str) -> list[EvalRecord]:
    """Slot for mapping a forum/QA export onto EvalRecord fields.

    Source material is not redistributable, so the mapping is left to the
    deployment that owns the data.
    """
    raise NotImplementedError(
        "map your QA export onto fields qa_id/question/reference_answer/category"
    )


# -- generation ------------------------------------------------------------------

# An answerer takes (record, run_index) and returns (text, route-or-None).
Answerer = Callable[[EvalRecord, int], tuple[str, Optional[str]]]


def _answer_key(qa_id: str, system: str, run_index: int) -> tuple[str, str, int]:
    return (qa_id, system, run_index)


def load_answers(path: Path | str) -> list[GeneratedAnswer]:
    out: list[GeneratedAnswer] = []
    path = Path(path)
    if not path.exists():
        return out
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            out.append(
                GeneratedAnswer(
                    qa_id=raw["qa_id"],
                    system=SystemName(raw["system"]),
                    run_index=raw["run_index"],
                    text=raw["text"],
                    timing_ms=raw["timing_ms"],
                    route=raw.get("route"),
                    error=raw.get("error"),
                )
            )
    return out


def generate(
    records: Sequence[EvalRecord],
    answerers: dict[SystemName, Answerer],
    out_path: Path | str,
    runs: int = 2,
    concurrency: int = 4,
) -> list[GeneratedAnswer]:
    """Produce runs x systems answers per record, appending to out_path.

    Resumable: (qa_id, system, run_index) triples already answered in the
    output file are skipped; failed triples are retried. A failing record is
    recorded with its error and never aborts the batch.
    """
    out_path = Path(out_path)
    existing = load_answers(out_path)
    done = {
        _answer_key(a.qa_id, a.system.value, a.run_index)
        for a in existing
        if a.error is None
    }
    tasks = [
        (record, system, run)
        for record in records
        for system in answerers
        for run in range(1, runs + 1)
        if _answer_key(record.qa_id, system.value, run) not in done
    ]

    write_lock = threading.Lock()
    fresh: list[GeneratedAnswer] = []

    def run_one(task: tuple[EvalRecord, SystemName, int]) -> None:
        record, system, run_index = task
        started = time.monotonic()
        try:
            text, route = answerers[system](record, run_index)
            answer = GeneratedAnswer(
                qa_id=record.qa_id,
                system=system,
                run_index=run_index,
                text=text,
                timing_ms=(time.monotonic() - started) * 1000.0,
                route=route,
            )
        except Exception as exc:  # a bad record must not sink the batch
            logger.warning("generation failed for %s/%s/%d: %s",
                           record.qa_id, system.value, run_index, exc)
            answer = GeneratedAnswer(
                qa_id=record.qa_id,
                system=system,
                run_index=run_index,
                text="",
                timing_ms=(time.monotonic() - started) * 1000.0,
                error=f"{type(exc).__name__}: {exc}",
            )
        row = {
            "qa_id": answer.qa_id,
            "system": answer.system.value,
            "run_index": answer.run_index,
            "text": answer.text,
            "timing_ms": round(answer.timing_ms, 3),
        }
        if answer.route is not None:
            row["route"] = answer.route
        if answer.error is not None:
            row["error"] = answer.error
        with write_lock:
            with out_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
            fresh.append(answer)

    if concurrency <= 1:
        for task in tasks:
            run_one(task)
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            list(pool.map(run_one, tasks))
    return existing + fresh


# -- answer sources ----------------------------------------------------------------

class PipelineAnswerer:
    """Asks the tutoring service over HTTP, one fresh session per answer.

    `client` is any httpx.Client-compatible object (an in-process test client
    works), so the harness never needs a live socket in tests. Every question
    goes to the configured course; that is what lets homework items hit the
    assignment route.
    """

    def __init__(self, client, course_id: str, token: str, base: str = ""):
        self._client = client
        self._course_id = course_id
        self._headers = {"Authorization": f"Bearer {token}"}
        self._base = base.rstrip("/")

    def __call__(self, record: EvalRecord, run_index: int) -> tuple[str, Optional[str]]:
        create = self._client.post(
            f"{self._base}/v1/sessions",
            json={"course_id": self._course_id},
            headers=self._headers,
        )
        create.raise_for_status()
        session_id = create.json()["session_id"]
        reply = self._client.post(
            f"{self._base}/v1/sessions/{session_id}/questions",
            json={"text": record.question},
            headers=self._headers,
        )
        reply.raise_for_status()
        body = reply.json()["answer"]
        return body["text"], body.get("route")


class BaselineAnswerer:
    """Sends the bare question to a chat-completions endpoint, no context."""

    def __init__(self, client, model_id: str, base: str = "", api_key: str = ""):
        self._client = client
        self._model_id = model_id
        self._base = base.rstrip("/")
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}

    def __call__(self, record: EvalRecord, run_index: int) -> tuple[str, Optional[str]]:
        reply = self._client.post(
            f"{self._base}/chat/completions",
            json={
                "model": self._model_id,
                "messages": [{"role": "user", "content": record.question}],
                "temperature": 0.0,
            },
            headers=self._headers,
        )
        reply.raise_for_status()
        text = reply.json()["choices"][0]["message"]["content"]
        return text, None


# -- rating sheets ---------------------------------------------------------------

def emit_rating_sheets(
    records: Sequence[EvalRecord],
    answers: Sequence[GeneratedAnswer],
    out_dir: Path | str,
    passes: int = 1,
    seed: Optional[int] = None,
) -> tuple[list[Path], Path]:
    """Write one CSV per rater pass plus the blinding key file.

    Each row carries an opaque blinded_system_key; the key file maps it back
    to (qa_id, system, run_index). Row order is a keyed shuffle so raters
    cannot infer the system from position.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    by_id = {r.qa_id: r for r in records}

    usable = [a for a in answers if a.error is None and a.qa_id in by_id]
    skipped = len(answers) - len(usable)
    if skipped:
        logger.warning("%d failed or unknown answers left out of the sheets", skipped)

    mapping: dict[str, dict] = {}
    rows = []
    for answer in usable:
        while True:
            key = f"{rng.getrandbits(48):012x}"
            if key not in mapping:
                break
        mapping[key] = {
            "qa_id": answer.qa_id,
            "system": answer.system.value,
            "run_index": answer.run_index,
        }
        record = by_id[answer.qa_id]
        rows.append(
            {
                "qa_id": answer.qa_id,
                "question": record.question,
                "reference_answer": record.reference_answer,
                "answer_text": answer.text,
                "blinded_system_key": key,
                "Usefulness": "",
                "Accuracy": "",
                "Appropriateness": "",
            }
        )

    columns = [
        "qa_id", "question", "reference_answer", "answer_text", "blinded_system_key",
        *CRITERIA,
    ]
    sheet_paths = []
    for pass_no in range(1, passes + 1):
        ordered = sorted(rows, key=lambda row: row["blinded_system_key"])
        rng.shuffle(ordered)
        path = out_dir / f"rater_{pass_no}.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            writer.writerows(ordered)
        sheet_paths.append(path)

    key_path = out_dir / "blinding_key.json"
    key_path.write_text(
        json.dumps({"keys": mapping}, indent=2, ensure_ascii=False), encoding="utf-8"
    )
    return sheet_paths, key_path


def parse_scored_sheets(
    sheet_paths: Sequence[Path | str], blinding_key_path: Path | str
) -> list[RubricScore]:
    """Turn filled rating sheets back into unblinded rubric scores.

    The rater id is the sheet's file stem. Blank cells are skipped (and
    surface later as missing-run warnings during aggregation)."""
    mapping = json.loads(Path(blinding_key_path).read_text(encoding="utf-8"))["keys"]
    scores: list[RubricScore] = []
    for sheet in sheet_paths:
        sheet = Path(sheet)
        rater_id = sheet.stem
        with sheet.open("r", encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                key = row.get("blinded_system_key", "")
                if key not in mapping:
                    raise InvalidScore(f"unknown blinded_system_key: {key!r}")
                identity = mapping[key]
                for criterion in CRITERIA:
                    cell = (row.get(criterion) or "").strip()
                    if not cell:
                        continue
                    try:
                        value = float(cell)
                    except ValueError:
                        raise InvalidScore(
                            f"non-numeric {criterion} score: {cell!r}"
                        ) from None
                    scores.append(
                        RubricScore(
                            qa_id=identity["qa_id"],
                            system=SystemName(identity["system"]),
                            criterion=criterion,
                            run_index=identity["run_index"],
                            score=value,
                            rater_id=rater_id,
                        )
                    )
    return scores


# -- aggregation -------------------------------------------------------------------

def round_half_up(value: float, places: int = 2) -> Decimal:
    return Decimal(repr(value)).quantize(
        Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP
    )


def summarize_means(criterion_means: dict[str, float]) -> dict[str, str]:
    """Display layer: two-decimal half-up strings, plus the Average row
    computed from the unrounded criterion means."""
    display = {
        criterion: str(round_half_up(mean)) for criterion, mean in criterion_means.items()
    }
    unrounded = [criterion_means[c] for c in CRITERIA if c in criterion_means]
    if unrounded:
        display["Average"] = str(round_half_up(sum(unrounded) / len(unrounded)))
    return display


@dataclass(frozen=True)
class AggregateReport:
    means: dict  # system -> criterion -> unrounded mean
    display: dict  # system -> row label -> 2-decimal string
    counts: dict  # system -> criterion -> number of scores
    warnings: tuple[str, ...]


def aggregate(scores: Sequence[RubricScore], expected_runs: int = 2) -> AggregateReport:
    """Mean per (system, criterion) at full precision; rounding only at the
    display layer. Missing runs are averaged over what exists and flagged."""
    if not scores:
        raise ValueError("no scores to aggregate")
    sums: dict[str, dict[str, float]] = {}
    counts: dict[str, dict[str, int]] = {}
    runs_seen: dict[tuple[str, str, str], set[int]] = {}
    for score in scores:
        system = score.system.value
        sums.setdefault(system, {}).setdefault(score.criterion, 0.0)
        counts.setdefault(system, {}).setdefault(score.criterion, 0)
        sums[system][score.criterion] += score.score
        counts[system][score.criterion] += 1
        runs_seen.setdefault((system, score.qa_id, score.criterion), set()).add(
            score.run_index
        )

    warnings = []
    for (system, qa_id, criterion), runs in sorted(runs_seen.items()):
        if len(runs) < expected_runs:
            warnings.append(
                f"{system}/{qa_id}/{criterion}: {len(runs)} of {expected_runs} runs scored"
            )

    means = {
        system: {
            criterion: sums[system][criterion] / counts[system][criterion]
            for criterion in sums[system]
        }
        for system in sums
    }
    display = {system: summarize_means(means[system]) for system in means}
    return AggregateReport(
        means=means, display=display, counts=counts, warnings=tuple(warnings)
    )


def write_report(
    report: AggregateReport, json_path: Path | str, md_path: Path | str
) -> None:
    systems = [s.value for s in (SystemName.Pipeline, SystemName.Baseline) if s.value in report.display]
    systems += [s for s in report.display if s not in systems]

    payload = {
        "systems": {
            system: {
                "criteria": {
                    criterion: {
                        "mean": report.means[system][criterion],
                        "display": report.display[system][criterion],
                    }
                    for criterion in CRITERIA
                    if criterion in report.means[system]
                },
                "average": report.display[system].get("Average"),
                "score_counts": report.counts[system],
            }
            for system in systems
        },
        "warnings": list(report.warnings),
    }
    Path(json_path).write_text(
        json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )

    lines = ["| Criterion | " + " | ".join(systems) + " |"]
    lines.append("|" + "---|" * (len(systems) + 1))
    for label in (*CRITERIA, "Average"):
        cells = [report.display[system].get(label, "-") for system in systems]
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    if report.warnings:
        lines.append("")
        lines.append("Warnings:")
        lines.extend(f"- {w}" for w in report.warnings)
    Path(md_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
