"""Lightweight hash-linked chain binding CIDs to the SHA-256 of their content.

A block is appended only after its CID has been fetched from the store and
hashed. Blocks are hashed over a fixed newline-joined serialization::

    index \\n timestamp_ms \\n cid \\n data_hash \\n prev_hash

so any edit to a stored block breaks either its own hash or the next
block's link. The genesis block is a universal constant (timestamp 0).
"""

from __future__ import annotations

import enum
import hashlib
import logging
import re
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Optional

from cidchain import _journal
from cidchain._journal import JournalCorrupt, JournalWriteError
from cidchain.cas import CasError, IntegrityMismatch

logger = logging.getLogger(__name__)

ZERO_HASH = "0" * 64
GENESIS_HASH = "ee71c230f841f72f041126787d092cce1eab67e07d472e20dca07cd706f3120e"
_HEX64 = re.compile(r"[0-9a-f]{64}")


class ChainError(Exception):
    pass


class FetchFailed(ChainError):
    pass


class LinkInvalid(ChainError):
    def __init__(self, index: int, message: str):
        super().__init__(message)
        self.index = index


class Verdict(str, enum.Enum):
    VERIFIED = "Verified"
    TAMPERED = "Tampered"
    UNAVAILABLE = "Unavailable"


@dataclass(frozen=True)
class Block:
    index: int
    timestamp_ms: int
    cid: str
    data_hash: str
    prev_hash: str
    block_hash: str

    @staticmethod
    def compute_hash(index: int, timestamp_ms: int, cid: str, data_hash: str, prev_hash: str) -> str:
        canonical = f"{index}\n{timestamp_ms}\n{cid}\n{data_hash}\n{prev_hash}"
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def make(cls, index: int, timestamp_ms: int, cid: str, data_hash: str, prev_hash: str) -> "Block":
        return cls(index, timestamp_ms, cid, data_hash, prev_hash,
                   cls.compute_hash(index, timestamp_ms, cid, data_hash, prev_hash))

    def recompute_hash(self) -> str:
        return self.compute_hash(self.index, self.timestamp_ms, self.cid, self.data_hash, self.prev_hash)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Block":
        return cls(
            index=int(d["index"]),
            timestamp_ms=int(d["timestamp_ms"]),
            cid=str(d["cid"]),
            data_hash=str(d["data_hash"]),
            prev_hash=str(d["prev_hash"]),
            block_hash=str(d["block_hash"]),
        )


def genesis() -> Block:
    return Block.make(0, 0, "", ZERO_HASH, ZERO_HASH)


@dataclass(frozen=True)
class LinkCheck:
    ok: bool
    failing_index: Optional[int] = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True)
class BlockVerdict:
    index: int
    cid: str
    verdict: Verdict
    stored_hash: str
    fetched_hash: Optional[str]
    fetch_time_s: Optional[float]
    size_bytes: Optional[int]


def _wall_ms() -> int:
    return time.time_ns() // 1_000_000


def check_links(blocks: list[Block]) -> LinkCheck:
    if not blocks:
        return LinkCheck(False, 0, "chain has no genesis block")
    if blocks[0] != genesis():
        return LinkCheck(False, 0, "genesis block differs from the canonical genesis")
    for k, block in enumerate(blocks):
        if block.index != k:
            return LinkCheck(False, k, f"index {block.index} at position {k}")
        if block.recompute_hash() != block.block_hash:
            return LinkCheck(False, k, "block hash does not match block contents")
        if k == 0:
            continue
        prev = blocks[k - 1]
        if block.prev_hash != prev.block_hash:
            return LinkCheck(False, k, "prev_hash does not link to the previous block")
        if not _HEX64.fullmatch(block.data_hash):
            return LinkCheck(False, k, "data_hash is not a SHA-256 hex digest")
        if not block.cid:
            return LinkCheck(False, k, "non-genesis block without a CID")
        if block.timestamp_ms < prev.timestamp_ms:
            return LinkCheck(False, k, "timestamp goes backwards")
    return LinkCheck(True)


class Chain:
    """Append-only chain persisted as one JSON line per block (genesis first)."""

    def __init__(self, journal_path: Optional[Path] = None, clock_ms: Callable[[], int] = _wall_ms):
        self.journal_path = Path(journal_path) if journal_path else None
        self.clock_ms = clock_ms
        self._blocks: list[Block] = []
        self._lock = threading.RLock()

    @classmethod
    def create(cls, journal_path: Optional[Path] = None, clock_ms: Callable[[], int] = _wall_ms) -> "Chain":
        chain = cls(journal_path, clock_ms)
        if chain.journal_path is not None:
            if chain.journal_path.exists() and chain.journal_path.stat().st_size:
                raise ChainError(f"{chain.journal_path} already holds a chain; use load()")
            chain.journal_path.parent.mkdir(parents=True, exist_ok=True)
        chain._append(genesis())
        return chain

    @property
    def blocks(self) -> tuple[Block, ...]:
        return tuple(self._blocks)

    def __len__(self) -> int:
        return len(self._blocks)

    def __iter__(self):
        return iter(tuple(self._blocks))

    def __repr__(self) -> str:
        return f"Chain(len={len(self._blocks)}, journal={self.journal_path})"

    def last_block(self) -> Block:
        return self._blocks[-1]

    def find(self, cid: str) -> Optional[Block]:
        for block in reversed(self._blocks):
            if block.cid == cid:
                return block
        return None

    def _append(self, block: Block) -> None:
        if self.journal_path is not None:
            _journal.append(self.journal_path, block.to_dict())
        self._blocks.append(block)

    def save_to_chain(self, cid, cas) -> Block:
        """Fetch ``cid`` from ``cas``, hash it and append a block binding the two.

        Nothing is appended when the fetch fails (unknown, unreachable or
        corrupted content) or the journal write fails.
        """
        cid_text = str(cid)
        try:
            data = cas.get(cid)
        except CasError as exc:
            raise FetchFailed(f"cannot fetch {cid_text}: {exc}") from exc
        data_hash = hashlib.sha256(data).hexdigest()
        with self._lock:
            prev = self.last_block()
            ts = max(self.clock_ms(), prev.timestamp_ms)
            block = Block.make(prev.index + 1, ts, cid_text, data_hash, prev.block_hash)
            self._append(block)
        logger.debug("block %d <- %s", block.index, cid_text)
        return block

    def verify_links(self) -> LinkCheck:
        with self._lock:
            return check_links(self._blocks)

    def verify_chain(self, cas) -> list[BlockVerdict]:
        """Re-fetch every block's CID and compare the content hash.

        Tampered means content came back but hashes differently (including a
        local store refusing it as corrupted); Unavailable means nothing came
        back at all.
        """
        results = []
        for block in self.blocks[1:]:
            start = time.perf_counter()
            try:
                data = cas.get(block.cid, verify=False)
            except IntegrityMismatch:
                results.append(BlockVerdict(block.index, block.cid, Verdict.TAMPERED,
                                            block.data_hash, None, None, None))
                continue
            except CasError as exc:
                logger.warning("block %d: %s unavailable: %s", block.index, block.cid, exc)
                results.append(BlockVerdict(block.index, block.cid, Verdict.UNAVAILABLE,
                                            block.data_hash, None, None, None))
                continue
            elapsed = time.perf_counter() - start
            fetched = hashlib.sha256(data).hexdigest()
            verdict = Verdict.VERIFIED if fetched == block.data_hash else Verdict.TAMPERED
            results.append(BlockVerdict(block.index, block.cid, verdict, block.data_hash,
                                        fetched, elapsed, len(data)))
        return results


def load(journal_path: Path, clock_ms: Callable[[], int] = _wall_ms) -> Chain:
    """Replay a chain journal; raises JournalCorrupt or LinkInvalid on a bad file."""
    journal_path = Path(journal_path)
    chain = Chain(journal_path, clock_ms)
    for lineno, entry in _journal.read(journal_path):
        try:
            chain._blocks.append(Block.from_dict(entry))
        except (KeyError, TypeError, ValueError) as exc:
            raise JournalCorrupt(journal_path, lineno, f"malformed block: {exc}") from exc
    check = chain.verify_links()
    if not check:
        raise LinkInvalid(check.failing_index, f"{journal_path}: block {check.failing_index}: {check.reason}")
    return chain


def open_or_create(journal_path: Path) -> Chain:
    journal_path = Path(journal_path)
    if journal_path.exists() and journal_path.stat().st_size:
        return load(journal_path)
    return Chain.create(journal_path)


def short_cid(cid: str) -> str:
    """First 10 and last 5 characters, for human-readable tables."""
    return cid if len(cid) <= 18 else f"{cid[:10]}...{cid[-5:]}"


__all__ = [
    "Block", "BlockVerdict", "Chain", "ChainError", "FetchFailed", "GENESIS_HASH",
    "JournalCorrupt", "JournalWriteError", "LinkCheck", "LinkInvalid", "Verdict",
    "check_links", "genesis", "load", "open_or_create", "short_cid",
]
