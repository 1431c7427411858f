"""Polling directory watcher.

Each scan lists the watched directory, double-stats candidate files to skip
anything still being written, and emits a FileEvent for every file whose
(path, size, mtime) key has not been seen before. Edited files get a new
key and are emitted again.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

logger = logging.getLogger(__name__)

STABILITY_PROBE_S = 0.1
SIZE_UNITS = ("Bytes", "KB", "MB", "GB")


class WatchRootMissing(FileNotFoundError):
    pass


@dataclass
class WatchConfig:
    root_dir: Path
    scan_interval_s: float = 5.0
    stop_after_s: Optional[float] = 1200.0  # None = run until stopped
    ignore_hidden: bool = True
    recursive: bool = False

    def __post_init__(self) -> None:
        self.root_dir = Path(self.root_dir)
        if not self.scan_interval_s > 0:
            raise ValueError("scan_interval_s must be positive")
        if self.stop_after_s is not None:
            if not self.stop_after_s > 0:
                raise ValueError("stop_after_s must be positive or None")
            if self.scan_interval_s >= self.stop_after_s:
                raise ValueError("scan_interval_s must be shorter than stop_after_s")


@dataclass(frozen=True)
class FileEvent:
    path: Path
    size_bytes: int
    detected_at: datetime
    dedup_key: str


@dataclass(frozen=True)
class WatchSummary:
    scans: int
    events: int
    stopped_by_signal: bool


def dedup_key(path: Path, size_bytes: int, mtime_ns: int) -> str:
    return f"{Path(path).resolve()}|{size_bytes}|{mtime_ns}"


def format_file_size(num_bytes: int) -> str:
    """Render a byte count in the largest unit whose value is at least 1.

    >>> format_file_size(1536)
    '1.50 KB'
    """
    if num_bytes < 0:
        raise ValueError("byte count must be non-negative")
    value = float(num_bytes)
    unit = 0
    while value >= 1024 and unit < len(SIZE_UNITS) - 1:
        value /= 1024
        unit += 1
    return f"{value:.2f} {SIZE_UNITS[unit]}"


def _utc_now_ms() -> datetime:
    now = datetime.now(timezone.utc)
    return now.replace(microsecond=now.microsecond // 1000 * 1000)


def _candidates(config: WatchConfig) -> list[Path]:
    root = config.root_dir
    if not root.is_dir():
        raise WatchRootMissing(f"watch root {root} does not exist")
    found = []
    stack = [root]
    while stack:
        current = stack.pop()
        try:
            entries = list(os.scandir(current))
        except FileNotFoundError:
            if current == root:
                raise WatchRootMissing(f"watch root {root} disappeared") from None
            continue
        except OSError as exc:
            logger.warning("cannot list %s: %s", current, exc)
            continue
        for entry in entries:
            if config.ignore_hidden and entry.name.startswith("."):
                continue
            try:
                if entry.is_dir(follow_symlinks=False):
                    if config.recursive:
                        stack.append(Path(entry.path))
                elif entry.is_file():
                    found.append(Path(entry.path))
            except OSError as exc:
                logger.warning("skipping %s: %s", entry.path, exc)
    return sorted(found)


def _probe(path: Path) -> Optional[tuple[int, int]]:
    try:
        st = path.stat()
    except OSError as exc:
        logger.warning("cannot stat %s: %s", path, exc)
        return None
    return st.st_size, st.st_mtime_ns


def scan_once(
    config: WatchConfig,
    seen: set[str],
    probe_delay_s: float = STABILITY_PROBE_S,
    sleep: Callable[[float], None] = time.sleep,
) -> list[FileEvent]:
    """Return events for new, stable, readable files and record them in ``seen``.

    Files whose size or mtime changes across two stats ``probe_delay_s`` apart
    are treated as still being copied and left for the next scan.
    """
    first = {}
    for path in _candidates(config):
        st = _probe(path)
        if st is not None and dedup_key(path, *st) not in seen:
            first[path] = st
    if not first:
        return []
    sleep(probe_delay_s)

    events = []
    for path, st in first.items():
        again = _probe(path)
        if again != st:
            logger.debug("%s still changing, deferring", path)
            continue
        if not os.access(path, os.R_OK):
            logger.warning("skipping unreadable file %s", path)
            continue
        key = dedup_key(path, *st)
        seen.add(key)
        events.append(FileEvent(path, st[0], _utc_now_ms(), key))
    return events


def watch(
    config: WatchConfig,
    sink: Callable[[FileEvent], object],
    stop: Optional[threading.Event] = None,
    seen: Optional[set[str]] = None,
    clock: Callable[[], float] = time.monotonic,
) -> WatchSummary:
    """Scan every ``scan_interval_s`` until ``stop_after_s`` elapses or ``stop`` is set.

    ``sink`` is called synchronously per event and should hand work off
    (e.g. to a queue) rather than block the scan loop.
    """
    stop = stop or threading.Event()
    seen = set() if seen is None else seen
    started = clock()
    deadline = None if config.stop_after_s is None else started + config.stop_after_s
    scans = emitted = 0
    logger.info("watching %s every %.2fs", config.root_dir, config.scan_interval_s)
    while not stop.is_set():
        for event in scan_once(config, seen):
            logger.info("new file %s (%s)", event.path, format_file_size(event.size_bytes))
            sink(event)
            emitted += 1
        scans += 1
        if deadline is not None:
            remaining = deadline - clock()
            if remaining <= 0:
                break
            stop.wait(min(config.scan_interval_s, remaining))
        else:
            stop.wait(config.scan_interval_s)
        if deadline is not None and clock() >= deadline:
            break
    by_signal = stop.is_set()
    if not by_signal:
        logger.info("stopped watching after %.0f seconds", config.stop_after_s)
    return WatchSummary(scans, emitted, by_signal)
