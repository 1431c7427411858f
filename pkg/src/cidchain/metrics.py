"""Timing, memory, bandwidth and energy accounting plus CSV report writers.

Energy follows the TDP model: instantaneous CPU% is sampled once before and
once after an upload, averaged, scaled by the processor TDP and multiplied
by the elapsed time. Bandwidth is size in KiB over elapsed seconds.
"""

from __future__ import annotations

import csv
import enum
import logging
import os
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Protocol, Sequence

logger = logging.getLogger(__name__)

KIB = 1024
MIB = 1024 * 1024

DEFAULT_TDP_WATTS = 15.0


def bandwidth(size_bytes: int, elapsed_s: float) -> float:
    """KB/s for ``size_bytes`` moved in ``elapsed_s`` seconds (KB = 1024 B)."""
    if not elapsed_s > 0:
        raise ValueError(f"elapsed time must be positive, got {elapsed_s!r}")
    return (size_bytes / KIB) / elapsed_s


def calculate_power(cpu_pct: float, tdp_watts: float) -> float:
    """Watts drawn at ``cpu_pct`` utilisation of a processor rated ``tdp_watts``."""
    if not 0 <= cpu_pct <= 100:
        raise ValueError(f"cpu_pct must be within [0, 100], got {cpu_pct!r}")
    if not tdp_watts > 0:
        raise ValueError(f"tdp_watts must be positive, got {tdp_watts!r}")
    return (cpu_pct / 100) * tdp_watts


@dataclass(frozen=True)
class UploadMetrics:
    size_bytes: int
    upload_time_s: float
    bandwidth_kb_s: float
    memory_used_mb: float = 0.0
    retrieval_time_s: Optional[float] = None
    # only observable on the remote backend
    processing_time_s: Optional[float] = None
    network_time_s: Optional[float] = None
    resources_available: bool = True
    empty: bool = False

    @classmethod
    def from_timing(cls, size_bytes: int, upload_time_s: float, **kw: Any) -> "UploadMetrics":
        """Build metrics from a measured duration, deriving bandwidth.

        A zero duration (possible only below timer resolution) reports a
        bandwidth of 0 rather than infinity.
        """
        if upload_time_s < 0:
            raise ValueError(f"negative upload time {upload_time_s!r}")
        bw = bandwidth(size_bytes, upload_time_s) if upload_time_s > 0 else 0.0
        return cls(
            size_bytes=size_bytes,
            upload_time_s=upload_time_s,
            bandwidth_kb_s=bw,
            empty=size_bytes == 0,
            **kw,
        )

    @property
    def size_kb(self) -> float:
        return self.size_bytes / KIB

    @property
    def size_mb(self) -> float:
        return self.size_bytes / MIB


@dataclass(frozen=True)
class EnergySample:
    initial_cpu_pct: float
    final_cpu_pct: float
    avg_cpu_pct: float
    duration_s: float
    tdp_watts: float
    energy_j: float

    @classmethod
    def from_readings(
        cls, initial_cpu_pct: float, final_cpu_pct: float, duration_s: float, tdp_watts: float
    ) -> "EnergySample":
        if duration_s < 0:
            raise ValueError(f"negative duration {duration_s!r}")
        avg = (initial_cpu_pct + final_cpu_pct) / 2
        energy = calculate_power(avg, tdp_watts) * duration_s
        return cls(initial_cpu_pct, final_cpu_pct, avg, duration_s, tdp_watts, energy)


class ResourceProbe(Protocol):
    def cpu_pct(self) -> float: ...

    def rss_mb(self) -> float: ...


class PsutilProbe:
    """Instantaneous system CPU% and this process's RSS via psutil."""

    def __init__(self) -> None:
        import psutil

        self._psutil = psutil
        self._proc = psutil.Process(os.getpid())
        # first cpu_percent(None) call only primes the counters
        psutil.cpu_percent(interval=None)

    def cpu_pct(self) -> float:
        return min(100.0, max(0.0, float(self._psutil.cpu_percent(interval=None))))

    def rss_mb(self) -> float:
        return self._proc.memory_info().rss / MIB


class FakeProbe:
    """Replays fixed readings in order; the last value repeats once exhausted."""

    def __init__(self, cpu: Sequence[float], rss: Sequence[float] = (0.0,)):
        if not cpu or not rss:
            raise ValueError("FakeProbe needs at least one reading of each kind")
        self._cpu = list(cpu)
        self._rss = list(rss)
        self._ci = 0
        self._ri = 0

    def cpu_pct(self) -> float:
        value = self._cpu[min(self._ci, len(self._cpu) - 1)]
        self._ci += 1
        return value

    def rss_mb(self) -> float:
        value = self._rss[min(self._ri, len(self._rss) - 1)]
        self._ri += 1
        return value


def measure_upload(
    path: Path,
    cas: Any,
    probe: Optional[ResourceProbe],
    tdp_watts: float = DEFAULT_TDP_WATTS,
    clock: Callable[[], float] = time.perf_counter,
):
    """Upload ``path`` through ``cas`` and account time, memory and energy.

    Returns ``(cid, metrics, energy)``. ``energy`` is None when the probe
    failed; the upload itself still goes through and ``metrics`` is marked
    with ``resources_available=False``.
    """
    readings_ok = probe is not None
    cpu0 = rss0 = 0.0
    if probe is not None:
        try:
            cpu0, rss0 = probe.cpu_pct(), probe.rss_mb()
        except Exception as exc:  # probe is best-effort
            logger.warning("resource probe failed before upload: %s", exc)
            readings_ok = False

    start = clock()
    cid, put_metrics = cas.put_file(path)
    end = clock()

    cpu1 = rss1 = 0.0
    if probe is not None and readings_ok:
        try:
            cpu1, rss1 = probe.cpu_pct(), probe.rss_mb()
        except Exception as exc:
            logger.warning("resource probe failed after upload: %s", exc)
            readings_ok = False

    duration = max(0.0, end - start)
    energy = None
    memory_used = 0.0
    if readings_ok:
        energy = EnergySample.from_readings(cpu0, cpu1, duration, tdp_watts)
        # RSS can shrink across an upload (GC, page release); M_used floors at 0
        memory_used = max(0.0, rss1 - rss0)

    metrics = UploadMetrics(
        size_bytes=put_metrics.size_bytes,
        upload_time_s=put_metrics.upload_time_s,
        bandwidth_kb_s=put_metrics.bandwidth_kb_s,
        memory_used_mb=memory_used,
        processing_time_s=put_metrics.processing_time_s,
        network_time_s=put_metrics.network_time_s,
        resources_available=readings_ok,
        empty=put_metrics.empty,
    )
    return cid, metrics, energy


class ReportSchema(enum.Enum):
    UPLOAD_TABLE7 = "upload_table7"
    PERF_TABLE11 = "perf_table11"
    CHAIN_TABLE12 = "chain_table12"
    ENERGY_CSV = "energy_csv"
    LEDGER_TABLE8 = "ledger_table8"

    @property
    def headers(self) -> tuple[str, ...]:
        return _HEADERS[self]


_HEADERS = {
    ReportSchema.UPLOAD_TABLE7: (
        "File Size (MB)", "Uploading Time (s)", "Power Consumption (J)", "Memory (MB)",
    ),
    ReportSchema.PERF_TABLE11: (
        "Operation", "Time (s)", "Memory (MB)", "Bandwidth (KB/s)", "Size (MB)", "CID",
    ),
    ReportSchema.CHAIN_TABLE12: (
        "Block", "CID", "Time (s)", "Size (B)", "Stored Hash", "Fetched Hash",
    ),
    ReportSchema.ENERGY_CSV: (
        "File", "File Size (MB)", "CID", "Start Time", "Duration (s)",
        "Initial CPU (%)", "Final CPU (%)", "Average CPU (%)", "Energy (J)",
    ),
    ReportSchema.LEDGER_TABLE8: (
        "Block Number", "Transaction Hash", "Gas Cost Units", "Transaction Cost Units",
        "Retrieval Time (ms)", "IPFS Hash",
    ),
}


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report(
    rows: Iterable[Mapping[str, Any] | Sequence[Any]], schema: ReportSchema | str, out_path: Path
) -> int:
    """Write ``rows`` as CSV under ``schema``'s header; returns the data row count.

    Rows are either mappings keyed exactly by the header names or sequences in
    header order. Floats are written at full precision so derived identities
    (bandwidth x time = size) survive a round trip through the file.
    """
    schema = ReportSchema(schema)
    headers = schema.headers
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(headers)
        for row in rows:
            if isinstance(row, Mapping):
                if set(row) != set(headers):
                    raise ValueError(
                        f"row keys {sorted(row)} do not match {schema.value} header {list(headers)}"
                    )
                values = [row[h] for h in headers]
            else:
                values = list(row)
                if len(values) != len(headers):
                    raise ValueError(f"row has {len(values)} cells, {schema.value} needs {len(headers)}")
            writer.writerow([_cell(v) for v in values])
            count += 1
    return count


def read_report(path: Path) -> tuple[tuple[str, ...], list[dict[str, str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        headers = tuple(next(reader))
        return headers, [dict(zip(headers, r)) for r in reader]


# ---- row builders ----

def table7_row(metrics: UploadMetrics, energy: Optional[EnergySample]) -> dict[str, Any]:
    return {
        "File Size (MB)": metrics.size_mb,
        "Uploading Time (s)": metrics.upload_time_s,
        "Power Consumption (J)": energy.energy_j if energy else None,
        "Memory (MB)": metrics.memory_used_mb,
    }


def table11_row(
    operation: str, time_s: float, memory_mb: float, size_bytes: int, cid: str
) -> dict[str, Any]:
    return {
        "Operation": operation,
        "Time (s)": time_s,
        "Memory (MB)": memory_mb,
        "Bandwidth (KB/s)": bandwidth(size_bytes, time_s) if time_s > 0 else 0.0,
        "Size (MB)": size_bytes / MIB,
        "CID": cid,
    }


def energy_row(
    path: Path, cid: str, started_at: datetime, metrics: UploadMetrics, energy: Optional[EnergySample]
) -> dict[str, Any]:
    return {
        "File": Path(path).name,
        "File Size (MB)": metrics.size_mb,
        "CID": cid,
        "Start Time": started_at.astimezone(timezone.utc).isoformat(timespec="milliseconds"),
        "Duration (s)": energy.duration_s if energy else metrics.upload_time_s,
        "Initial CPU (%)": energy.initial_cpu_pct if energy else None,
        "Final CPU (%)": energy.final_cpu_pct if energy else None,
        "Average CPU (%)": energy.avg_cpu_pct if energy else None,
        "Energy (J)": energy.energy_j if energy else None,
    }


def check_bandwidth_identity(size_bytes: int, time_s: float, bandwidth_kb_s: float, rel_tol: float = 1e-6) -> None:
    """Raise if bandwidth x time disagrees with the size in KB."""
    if time_s <= 0:
        if bandwidth_kb_s != 0:
            raise AssertionError(f"zero-duration row has nonzero bandwidth {bandwidth_kb_s}")
        return
    size_kb = size_bytes / KIB
    product = bandwidth_kb_s * time_s
    if size_kb == 0:
        if product != 0:
            raise AssertionError(f"empty payload with bandwidth {bandwidth_kb_s}")
        return
    if abs(product - size_kb) > rel_tol * size_kb:
        raise AssertionError(f"bandwidth identity broken: {product} != {size_kb} KB")
