"""Single-file relational store for courses and session transcripts."""

from __future__ import annotations

import json
import sqlite3
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from .pipeline import Turn


def rfc3339_now() -> str:
    return datetime.now(timezone.utc).isoformat()

_SCHEMA = """
CREATE TABLE IF NOT EXISTS courses (
    course_id TEXT PRIMARY KEY,
    title TEXT NOT NULL,
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS sessions (
    session_id TEXT PRIMARY KEY,
    course_id TEXT NOT NULL REFERENCES courses(course_id),
    created_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS turns (
    session_id TEXT NOT NULL REFERENCES sessions(session_id),
    idx INTEGER NOT NULL,
    role TEXT NOT NULL,
    text TEXT NOT NULL,
    meta TEXT,
    PRIMARY KEY (session_id, idx)
);
"""


@dataclass(frozen=True)
class CourseRow:
    course_id: str
    title: str
    created_at: str


@dataclass(frozen=True)
class SessionRow:
    session_id: str
    course_id: str
    created_at: str


class Database:
    def __init__(self, path: Path | str):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._conn = sqlite3.connect(self.path, check_same_thread=False)
        self._conn.execute("PRAGMA journal_mode=WAL")
        self._lock = threading.RLock()
        with self._lock, self._conn:
            self._conn.executescript(_SCHEMA)

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    # -- courses --

    def create_course(
        self, course_id: str, title: str, created_at: Optional[str] = None
    ) -> bool:
        created_at = created_at or rfc3339_now()
        with self._lock, self._conn:
            try:
                self._conn.execute(
                    "INSERT INTO courses (course_id, title, created_at) VALUES (?, ?, ?)",
                    (course_id, title, created_at),
                )
            except sqlite3.IntegrityError:
                return False
        return True

    def get_course(self, course_id: str) -> Optional[CourseRow]:
        with self._lock:
            row = self._conn.execute(
                "SELECT course_id, title, created_at FROM courses WHERE course_id = ?",
                (course_id,),
            ).fetchone()
        return CourseRow(*row) if row else None

    def list_courses(self) -> list[CourseRow]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT course_id, title, created_at FROM courses ORDER BY course_id"
            ).fetchall()
        return [CourseRow(*row) for row in rows]

    # -- sessions --

    def create_session(
        self, session_id: str, course_id: str, created_at: Optional[str] = None
    ) -> None:
        created_at = created_at or rfc3339_now()
        with self._lock, self._conn:
            self._conn.execute(
                "INSERT INTO sessions (session_id, course_id, created_at) VALUES (?, ?, ?)",
                (session_id, course_id, created_at),
            )

    def get_session(self, session_id: str) -> Optional[SessionRow]:
        with self._lock:
            row = self._conn.execute(
                "SELECT session_id, course_id, created_at FROM sessions WHERE session_id = ?",
                (session_id,),
            ).fetchone()
        return SessionRow(*row) if row else None

    # -- transcripts --

    def transcript(self, session_id: str, last: Optional[int] = None) -> list[Turn]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT role, text, meta FROM turns WHERE session_id = ? ORDER BY idx",
                (session_id,),
            ).fetchall()
        turns = [
            Turn(role, text, json.loads(meta) if meta else None) for role, text, meta in rows
        ]
        return turns[-last:] if last else turns

    def turn_count(self, session_id: str) -> int:
        with self._lock:
            (n,) = self._conn.execute(
                "SELECT COUNT(*) FROM turns WHERE session_id = ?", (session_id,)
            ).fetchone()
        return n

    def append_turn(self, session_id: str, turn: Turn) -> None:
        with self._lock, self._conn:
            (n,) = self._conn.execute(
                "SELECT COUNT(*) FROM turns WHERE session_id = ?", (session_id,)
            ).fetchone()
            self._conn.execute(
                "INSERT INTO turns (session_id, idx, role, text, meta) VALUES (?, ?, ?, ?, ?)",
                (
                    session_id,
                    n,
                    turn.role,
                    turn.text,
                    json.dumps(turn.meta, ensure_ascii=False) if turn.meta else None,
                ),
            )


class DbSession:
    """Adapter giving the pipeline its session interface over the database.

    The lock comes from a per-session registry so concurrent questions on the
    same session serialize even across separate DbSession instances.
    """

    def __init__(self, db: Database, session_id: str, course_id: str, lock: threading.RLock):
        self.db = db
        self.session_id = session_id
        self.course_id = course_id
        self.lock = lock

    def recent(self, n: int) -> list[Turn]:
        return self.db.transcript(self.session_id, last=n)

    def append(self, turn: Turn) -> None:
        self.db.append_turn(self.session_id, turn)


class SessionLocks:
    def __init__(self) -> None:
        self._locks: dict[str, threading.RLock] = {}
        self._mutex = threading.Lock()

    def get(self, session_id: str) -> threading.RLock:
        with self._mutex:
            if session_id not in self._locks:
                self._locks[session_id] = threading.RLock()
            return self._locks[session_id]
