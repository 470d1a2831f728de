import sqlite3
import json
import logging
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

from config import DB_TIMEOUT, LEDGER_FILENAME

logger = logging.getLogger(__name__)

TASK_STATES = ("started", "finished", "failed")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class TaskLedger:
    """
    Per-run task ledger.
    Records the lifecycle of every (method, N, run seed) task, its tracebacks
    and warnings, next to the run's CSV outputs.
    """

    def __init__(self, run_dir: Path, filename: str = LEDGER_FILENAME):
        self.db_path = Path(run_dir) / filename
        self.lock = threading.Lock()
        self._init_database()

    def _init_database(self):
        """Initialize database with required tables"""
        try:
            with self.get_connection() as conn:
                cursor = conn.cursor()

                cursor.execute("""
                    CREATE TABLE IF NOT EXISTS tasks (
                        key TEXT PRIMARY KEY,
                        method TEXT NOT NULL,
                        n INTEGER NOT NULL,
                        run_seed INTEGER NOT NULL,
                        state TEXT NOT NULL,
                        started_at TEXT,
                        finished_at TEXT,
                        error TEXT
                    )
                """)

                cursor.execute("""
                    CREATE TABLE IF NOT EXISTS events (
                        id INTEGER PRIMARY KEY AUTOINCREMENT,
                        task_key TEXT NOT NULL,
                        kind TEXT NOT NULL,
                        message TEXT,
                        metadata TEXT,
                        timestamp TEXT NOT NULL
                    )
                """)
        except sqlite3.Error as e:
            logger.error(f"Error initializing task ledger: {e}")
            raise

    def get_connection(self):
        """Get a database connection with a timeout"""
        conn = sqlite3.connect(self.db_path, timeout=DB_TIMEOUT)
        conn.row_factory = sqlite3.Row
        return conn

    def _event(self, conn, task_key: str, kind: str, message: str = "", metadata: Optional[Dict[str, Any]] = None):
        conn.execute(
            "INSERT INTO events (task_key, kind, message, metadata, timestamp) VALUES (?, ?, ?, ?, ?)",
            (task_key, kind, message, json.dumps(metadata or {}, sort_keys=True), _now()),
        )

    def start(self, task_key: str, method: str, n: int, run_seed: int):
        with self.lock, self.get_connection() as conn:
            conn.execute(
                "INSERT OR REPLACE INTO tasks (key, method, n, run_seed, state, started_at) VALUES (?, ?, ?, ?, ?, ?)",
                (task_key, method, n, run_seed, "started", _now()),
            )
            self._event(conn, task_key, "started")

    def finish(self, task_key: str, metadata: Optional[Dict[str, Any]] = None):
        with self.lock, self.get_connection() as conn:
            conn.execute("UPDATE tasks SET state = ?, finished_at = ? WHERE key = ?", ("finished", _now(), task_key))
            self._event(conn, task_key, "finished", metadata=metadata)

    def fail(self, task_key: str, error: str):
        with self.lock, self.get_connection() as conn:
            conn.execute("UPDATE tasks SET state = ?, finished_at = ?, error = ? WHERE key = ?",
                         ("failed", _now(), error, task_key))
            self._event(conn, task_key, "failed", error)

    def warn(self, task_key: str, message: str):
        with self.lock, self.get_connection() as conn:
            self._event(conn, task_key, "warning", message)

    def tasks(self, state: Optional[str] = None) -> List[Dict[str, Any]]:
        query = "SELECT key, method, n, run_seed, state, error FROM tasks"
        args: tuple = ()
        if state is not None:
            query += " WHERE state = ?"
            args = (state,)
        with self.get_connection() as conn:
            rows = conn.execute(query + " ORDER BY key", args).fetchall()
        return [dict(row) for row in rows]

    def events(self, task_key: str) -> List[Dict[str, Any]]:
        with self.get_connection() as conn:
            rows = conn.execute("SELECT kind, message FROM events WHERE task_key = ? ORDER BY id",
                                (task_key,)).fetchall()
        return [dict(row) for row in rows]
