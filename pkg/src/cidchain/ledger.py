"""Simulated, gas-metered CID registry.

Mirrors a minimal storage contract: each user address owns an append-only
list of (cid, timestamp, store time) records. Every state change is a
transaction with its own block number, a SHA-256 transaction hash and
deterministic gas accounting, and is journaled (one fsync'd JSON line) before
it becomes visible. Reads are free and do not advance the block number.

Gas is affine in the CID's byte length. The defaults reproduce 752110 gas and
654008 transaction cost units for a 46-byte CIDv0.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

from cidchain import _journal
from cidchain._journal import JournalCorrupt, JournalWriteError

logger = logging.getLogger(__name__)

ZERO_ADDRESS = "0x" + "0" * 40
ADDRESS_RE = re.compile(r"0x[0-9a-fA-F]{40}")

OP_DEPLOY = "deploy"
OP_STORE = "storeData"


class LedgerError(Exception):
    pass


class EmptyCid(LedgerError, ValueError):
    pass


class IndexOutOfRange(LedgerError, IndexError):
    pass


class ReplayMismatch(LedgerError):
    """A journal entry disagrees with what replaying it recomputes."""


@dataclass(frozen=True)
class GasSchedule:
    gas_base: int = 747510
    gas_per_byte: int = 100
    intrinsic_overhead: int = 98102
    deploy_gas: int = 1500000

    def __post_init__(self) -> None:
        for name in ("gas_base", "gas_per_byte", "deploy_gas"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.intrinsic_overhead < 0:
            raise ValueError("intrinsic_overhead must be non-negative")

    def store_gas(self, cid: str) -> int:
        return self.gas_base + self.gas_per_byte * len(cid.encode("utf-8"))

    def tx_cost(self, gas_used: int) -> int:
        # floors at zero for tiny custom schedules
        return max(0, gas_used - self.intrinsic_overhead)

    def to_payload(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class DataRecord:
    ipfs_hash: str
    timestamp: int  # UTC ms at commit
    store_time_ms: int


@dataclass(frozen=True)
class TxReceipt:
    block_number: int
    tx_hash: str
    gas_used: int
    tx_cost_units: int
    user: str
    timestamp_ms: int
    op: str = OP_STORE


@dataclass(frozen=True)
class LedgerEvent:
    name: str  # DataStored | DataRetrieved
    user: str
    ipfs_hash: str
    timestamp_ms: int
    elapsed_ms: int  # storeTimeTaken or retrievalTimeTaken


def tx_hash(block_number: int, user: str, op: str, payload: str, timestamp_ms: int) -> str:
    canonical = f"{block_number}\n{user}\n{op}\n{payload}\n{timestamp_ms}"
    return "0x" + hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def gas_cost(gas_used: int, gas_price: float) -> float:
    """Fee for ``gas_used`` at ``gas_price`` (any unit: wei, gwei, ...)."""
    return gas_used * gas_price


def _wall_ms() -> int:
    return time.time_ns() // 1_000_000


def _check_address(user: str) -> str:
    if not ADDRESS_RE.fullmatch(user or ""):
        raise ValueError(f"not an address: {user!r}")
    return user


class Ledger:
    """One deployed registry. Create with :func:`deploy` or :meth:`Ledger.open`."""

    def __init__(
        self,
        schedule: GasSchedule,
        journal_path: Optional[Path] = None,
        clock_ms: Callable[[], int] = _wall_ms,
    ):
        self.schedule = schedule
        self.journal_path = Path(journal_path) if journal_path else None
        self.clock_ms = clock_ms
        self.receipts: list[TxReceipt] = []
        self.events: list[LedgerEvent] = []
        self._records: dict[str, list[DataRecord]] = {}
        self._lock = threading.RLock()

    def __repr__(self) -> str:
        return f"Ledger(block={self.block_number}, journal={self.journal_path})"

    @property
    def block_number(self) -> int:
        return self.receipts[-1].block_number if self.receipts else 0

    def _next_timestamp(self) -> int:
        last = self.receipts[-1].timestamp_ms if self.receipts else 0
        return max(self.clock_ms(), last)

    def _commit(self, entry: dict) -> None:
        if self.journal_path is not None:
            _journal.append(self.journal_path, entry)

    def _deploy(self, deployer: str) -> TxReceipt:
        ts = self._next_timestamp()
        payload = self.schedule.to_payload()
        gas = self.schedule.deploy_gas
        receipt = TxReceipt(
            1, tx_hash(1, deployer, OP_DEPLOY, payload, ts), gas,
            self.schedule.tx_cost(gas), deployer, ts, OP_DEPLOY,
        )
        self._commit(_entry(receipt, payload))
        self.receipts.append(receipt)
        return receipt

    def store_data(
        self, user: str, cid: str, submitted_at: Optional[float] = None
    ) -> tuple[TxReceipt, DataRecord]:
        """Append ``cid`` to ``user``'s records as one transaction.

        ``submitted_at`` is a ``time.perf_counter()`` reading taken by the client
        when it submitted; the store time runs from there to the commit.
        """
        t0 = time.perf_counter() if submitted_at is None else submitted_at
        cid = str(cid) if cid is not None else ""
        if not cid:
            raise EmptyCid("cannot store an empty CID")
        _check_address(user)
        with self._lock:
            block = self.block_number + 1
            ts = self._next_timestamp()
            gas = self.schedule.store_gas(cid)
            receipt = TxReceipt(
                block, tx_hash(block, user, OP_STORE, cid, ts), gas,
                self.schedule.tx_cost(gas), user, ts,
            )
            store_ms = max(0, round((time.perf_counter() - t0) * 1000))
            record = DataRecord(cid, ts, store_ms)
            # journal first: a failed append leaves memory untouched
            self._commit(_entry(receipt, cid, store_ms))
            self._apply_store(receipt, record)
        return receipt, record

    def _apply_store(self, receipt: TxReceipt, record: DataRecord) -> None:
        self.receipts.append(receipt)
        self._records.setdefault(receipt.user, []).append(record)
        self.events.append(
            LedgerEvent("DataStored", receipt.user, record.ipfs_hash, record.timestamp, record.store_time_ms)
        )

    def retrieve_data(self, user: str, index: int) -> tuple[str, int]:
        """Return ``(cid, age_ms)`` for ``user``'s record at ``index``.

        ``age_ms`` is the time since the record was committed, not an I/O
        duration. Logs a DataRetrieved event; charges no gas and does not
        touch the journal.
        """
        with self._lock:
            records = self._records.get(user, [])
            if not 0 <= index < len(records):
                raise IndexOutOfRange(f"index {index} out of range for {user} ({len(records)} records)")
            record = records[index]
            now = self.clock_ms()
            age = max(0, now - record.timestamp)
            self.events.append(LedgerEvent("DataRetrieved", user, record.ipfs_hash, now, age))
        return record.ipfs_hash, age

    def get_data_count(self, user: str) -> int:
        return len(self._records.get(user, ()))

    def records(self, user: str) -> list[DataRecord]:
        return list(self._records.get(user, ()))

    def users(self) -> list[str]:
        return list(self._records)

    def find(self, user: str, cid: str) -> Optional[int]:
        for i, rec in enumerate(self._records.get(user, ())):
            if rec.ipfs_hash == cid:
                return i
        return None

    def receipt_for(self, user: str, index: int) -> TxReceipt:
        stores = [r for r in self.receipts if r.op == OP_STORE and r.user == user]
        return stores[index]

    @classmethod
    def open(cls, journal_path: Path, clock_ms: Callable[[], int] = _wall_ms) -> "Ledger":
        """Rebuild a ledger by replaying its journal, checking every entry."""
        journal_path = Path(journal_path)
        lines = list(_journal.read(journal_path))
        if not lines:
            raise JournalCorrupt(journal_path, 0, "empty ledger journal")
        lineno, first = lines[0]
        if first.get("op") != OP_DEPLOY:
            raise ReplayMismatch(f"{journal_path}:{lineno}: first entry is not a deploy")
        try:
            schedule = GasSchedule(**json.loads(first["payload"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ReplayMismatch(f"{journal_path}:{lineno}: bad deploy payload: {exc}") from exc
        ledger = cls(schedule, journal_path, clock_ms)
        for lineno, entry in lines:
            try:
                receipt, payload, store_ms = _from_entry(entry)
            except (KeyError, TypeError, ValueError) as exc:
                raise JournalCorrupt(journal_path, lineno, f"malformed entry: {exc}") from exc
            expected_block = ledger.block_number + 1
            if receipt.block_number != expected_block:
                raise ReplayMismatch(
                    f"{journal_path}:{lineno}: block {receipt.block_number}, expected {expected_block}"
                )
            if receipt.tx_hash != tx_hash(receipt.block_number, receipt.user, receipt.op, payload, receipt.timestamp_ms):
                raise ReplayMismatch(f"{journal_path}:{lineno}: tx_hash does not match its transaction")
            if receipt.op == OP_DEPLOY:
                if receipt.block_number != 1:
                    raise ReplayMismatch(f"{journal_path}:{lineno}: deploy after block 1")
                expected_gas = schedule.deploy_gas
            elif receipt.op == OP_STORE:
                expected_gas = schedule.store_gas(payload)
            else:
                raise ReplayMismatch(f"{journal_path}:{lineno}: unknown op {receipt.op!r}")
            if receipt.gas_used != expected_gas or receipt.tx_cost_units != schedule.tx_cost(expected_gas):
                raise ReplayMismatch(f"{journal_path}:{lineno}: gas accounting does not match the schedule")
            if receipt.op == OP_DEPLOY:
                ledger.receipts.append(receipt)
            else:
                ledger._apply_store(receipt, DataRecord(payload, receipt.timestamp_ms, store_ms))
        return ledger


def _entry(receipt: TxReceipt, payload: str, store_time_ms: Optional[int] = None) -> dict:
    entry = {
        "block": receipt.block_number,
        "tx_hash": receipt.tx_hash,
        "op": receipt.op,
        "user": receipt.user,
        "payload": payload,
        "timestamp_ms": receipt.timestamp_ms,
        "gas_used": receipt.gas_used,
        "tx_cost_units": receipt.tx_cost_units,
    }
    if store_time_ms is not None:
        entry["store_time_ms"] = store_time_ms
    return entry


def _from_entry(entry: dict) -> tuple[TxReceipt, str, int]:
    receipt = TxReceipt(
        block_number=int(entry["block"]),
        tx_hash=str(entry["tx_hash"]),
        gas_used=int(entry["gas_used"]),
        tx_cost_units=int(entry["tx_cost_units"]),
        user=str(entry["user"]),
        timestamp_ms=int(entry["timestamp_ms"]),
        op=str(entry["op"]),
    )
    return receipt, str(entry["payload"]), int(entry.get("store_time_ms", 0))


def deploy(
    schedule: Optional[GasSchedule] = None,
    journal_path: Optional[Path] = None,
    deployer: str = ZERO_ADDRESS,
    clock_ms: Callable[[], int] = _wall_ms,
) -> tuple[Ledger, TxReceipt]:
    """Create a fresh, empty ledger; its deploy transaction is block 1."""
    schedule = schedule or GasSchedule()
    _check_address(deployer)
    if journal_path is not None:
        journal_path = Path(journal_path)
        if journal_path.exists() and journal_path.stat().st_size:
            raise LedgerError(f"{journal_path} already holds a ledger; use Ledger.open")
        journal_path.parent.mkdir(parents=True, exist_ok=True)
    ledger = Ledger(schedule, journal_path, clock_ms)
    return ledger, ledger._deploy(deployer)


__all__ = [
    "DataRecord", "EmptyCid", "GasSchedule", "IndexOutOfRange", "JournalCorrupt",
    "JournalWriteError", "Ledger", "LedgerError", "LedgerEvent", "ReplayMismatch",
    "TxReceipt", "ZERO_ADDRESS", "deploy", "gas_cost", "tx_hash",
]
