"""Persistent record of finished grid cells, so an interrupted grid resumes where it stopped.

A cell is keyed on its (schedule, norm mode, seed) and on fingerprints of the
effective run config and of the dataset, so a rerun with other hyperparameters
or other data never reuses a stale result.
"""
import hashlib
import json
import sqlite3
import time
from typing import NamedTuple

from config import runs_db_path


class CellKey(NamedTuple):
    schedule: str
    norm_mode: str
    seed: int
    config_hash: str
    data_hash: str


def config_fingerprint(document) -> str:
    """sha256 of the canonical JSON form of a run config document."""
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def open_store(out_dir):
    path = runs_db_path(out_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    connection = sqlite3.connect(path)
    connection.execute(
        """
        CREATE TABLE IF NOT EXISTS grid_runs (
            schedule TEXT NOT NULL,
            norm_mode TEXT NOT NULL,
            seed INTEGER NOT NULL,
            config_hash TEXT NOT NULL,
            data_hash TEXT NOT NULL,
            summary TEXT NOT NULL,
            finished_at INTEGER NOT NULL,
            PRIMARY KEY (schedule, norm_mode, seed, config_hash, data_hash)
        )
        """
    )
    connection.commit()
    return connection


def cell_summary(connection, key: CellKey):
    """Stored summary of a finished cell, or None when it has not run under this key."""
    row = connection.execute(
        """
        SELECT summary FROM grid_runs
        WHERE schedule = ? AND norm_mode = ? AND seed = ? AND config_hash = ? AND data_hash = ?
        """,
        tuple(key),
    ).fetchone()
    return json.loads(row[0]) if row else None


def mark_finished(connection, key: CellKey, summary):
    connection.execute(
        """
        INSERT OR REPLACE INTO grid_runs
            (schedule, norm_mode, seed, config_hash, data_hash, summary, finished_at)
        VALUES (?, ?, ?, ?, ?, ?, ?)
        """,
        (*key, json.dumps(summary, sort_keys=True), int(time.time())),
    )
    connection.commit()
