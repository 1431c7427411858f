"""Newline-delimited JSON journals with one fsync'd line per commit."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Iterator


class JournalCorrupt(Exception):
    """A journal line could not be parsed (torn write, manual edit, ...)."""

    def __init__(self, path: Path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.path = path
        self.lineno = lineno


class JournalWriteError(Exception):
    """Appending to a journal failed; the entry is not committed."""


def encode_line(entry: dict[str, Any]) -> bytes:
    return (json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def append(path: Path, entry: dict[str, Any]) -> None:
    """Append one entry and fsync before returning.

    On failure the file is truncated back to its previous length so a
    partial line never survives an error we can observe.
    """
    data = encode_line(entry)
    try:
        fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    except OSError as exc:
        raise JournalWriteError(f"cannot open journal {path}: {exc}") from exc
    try:
        start = os.fstat(fd).st_size
        try:
            # single write() so a kill lands before or after the line, not inside it
            written = os.write(fd, data)
            if written != len(data):
                raise OSError(f"short write ({written}/{len(data)} bytes)")
            os.fsync(fd)
        except OSError as exc:
            try:
                os.ftruncate(fd, start)
            except OSError:
                pass
            raise JournalWriteError(f"journal append to {path} failed: {exc}") from exc
    finally:
        os.close(fd)


def read(path: Path) -> Iterator[tuple[int, dict[str, Any]]]:
    """Yield (line number, entry); any malformed line raises JournalCorrupt."""
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.endswith(b"\n"):
                raise JournalCorrupt(path, lineno, "truncated final line")
            try:
                entry = json.loads(raw)
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                raise JournalCorrupt(path, lineno, f"invalid JSON: {exc}") from exc
            if not isinstance(entry, dict):
                raise JournalCorrupt(path, lineno, "entry is not an object")
            yield lineno, entry


def drop_torn_tail(path: Path) -> bool:
    """Cut an unterminated trailing line left by a crash mid-append.

    Returns True if anything was removed. Only the final line is touched;
    corruption elsewhere still surfaces on read().
    """
    with open(path, "rb+") as fh:
        data = fh.read()
        if not data or data.endswith(b"\n"):
            return False
        fh.truncate(data.rfind(b"\n") + 1)
        fh.flush()
        os.fsync(fh.fileno())
    return True
