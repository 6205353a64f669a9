"""Append-only, line-delimited JSON session journal.

Record types: ``header`` (space, objectives, options), ``status``, ``batch``
(the configurations about to be evaluated), ``sample`` and ``iteration``.
A batch record is written before its evaluations start, so a resumed
session can finish an interrupted batch exactly as planned.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

RECORD_TYPES = ("header", "status", "batch", "sample", "iteration")
FORMAT_VERSION = 1


class CorruptJournalError(ValueError):
    pass


class Journal:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8", newline="\n")

    def write(self, record: dict[str, Any]) -> None:
        self._fh.write(json.dumps(record, separators=(",", ":"), allow_nan=False) + "\n")
        self._fh.flush()

    def sync(self) -> None:
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        if not self._fh.closed:
            self.sync()
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_journal(path: str | Path) -> list[dict[str, Any]]:
    """Parse every record; raise CorruptJournalError naming the last valid one."""
    path = Path(path)
    data = path.read_bytes()
    records: list[dict[str, Any]] = []

    def fail(msg: str):
        if records:
            last = f"last valid record is #{len(records)} ({records[-1]['type']})"
        else:
            last = "no valid record"
        raise CorruptJournalError(f"{path}: {msg}; {last}")

    lines = data.split(b"\n")
    partial = lines.pop()
    for n, raw in enumerate(lines, start=1):
        try:
            rec = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            fail(f"record #{n} is not valid JSON")
        if not isinstance(rec, dict) or rec.get("type") not in RECORD_TYPES:
            fail(f"record #{n} has no recognised type")
        if n == 1 and rec["type"] != "header":
            fail("first record is not a session header")
        if n > 1 and rec["type"] == "header":
            fail(f"record #{n} is a second session header")
        records.append(rec)
    if partial:
        fail(f"record #{len(records) + 1} is truncated (no line terminator)")
    if not records:
        fail("journal is empty")
    return records
