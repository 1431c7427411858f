"""Content-addressed storage: a local on-disk store and an IPFS HTTP API client.

The local store names content by the base58btc-encoded SHA-256 multihash of
the raw bytes (one block, no chunking), so a local CID is always 46
characters starting with "Qm". The remote client never computes CIDs
itself; whatever the daemon returns is authoritative. CIDs are therefore
not comparable across backends for content above the daemon's chunk size.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import logging
import os
import re
import tempfile
import threading
import time
import uuid
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import BinaryIO, Iterator, Optional

from cidchain import _journal
from cidchain.metrics import UploadMetrics

logger = logging.getLogger(__name__)

CHUNK_SIZE = 8 * 1024 * 1024

SHA2_256 = 0x12
SHA2_256_LEN = 0x20

B58_ALPHABET = "123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz"
_B58_INDEX = {c: i for i, c in enumerate(B58_ALPHABET)}
LOCAL_CID_RE = re.compile(r"Qm[1-9A-HJ-NP-Za-km-z]{44}")


class CasError(Exception):
    retriable = False


class ContentNotFound(CasError, KeyError):
    def __str__(self) -> str:  # KeyError would repr() the message
        return str(self.args[0]) if self.args else "content not found"


class IntegrityMismatch(CasError):
    """Stored bytes no longer hash to the CID they are filed under."""


class BackendUnreachable(CasError):
    retriable = True


class StorageFull(CasError):
    """The local store could not write an object (disk full, permissions)."""


class InvalidCid(CasError, ValueError):
    pass


def b58encode(data: bytes) -> str:
    n = int.from_bytes(data, "big")
    out = []
    while n:
        n, rem = divmod(n, 58)
        out.append(B58_ALPHABET[rem])
    # each leading zero byte is a literal '1'
    pad = len(data) - len(data.lstrip(b"\0"))
    return "1" * pad + "".join(reversed(out))


def b58decode(text: str) -> bytes:
    n = 0
    for ch in text:
        try:
            n = n * 58 + _B58_INDEX[ch]
        except KeyError:
            raise ValueError(f"invalid base58 character {ch!r}") from None
    body = n.to_bytes((n.bit_length() + 7) // 8, "big")
    pad = len(text) - len(text.lstrip("1"))
    return b"\0" * pad + body


def multihash_sha256(digest: bytes) -> bytes:
    if len(digest) != SHA2_256_LEN:
        raise ValueError("SHA-256 digest must be 32 bytes")
    return bytes((SHA2_256, SHA2_256_LEN)) + digest


class BackendKind(str, enum.Enum):
    LOCAL = "local"
    REMOTE = "remote"


@dataclass(frozen=True)
class Cid:
    text: str
    backend_kind: BackendKind = BackendKind.LOCAL

    def __post_init__(self) -> None:
        if not self.text:
            raise InvalidCid("CID text must be non-empty")

    def __str__(self) -> str:
        return self.text

    @classmethod
    def from_digest(cls, digest: bytes) -> "Cid":
        return cls(b58encode(multihash_sha256(digest)), BackendKind.LOCAL)

    @classmethod
    def for_content(cls, content: bytes) -> "Cid":
        return cls.from_digest(hashlib.sha256(content).digest())

    @classmethod
    def parse_local(cls, text: str) -> "Cid":
        if not LOCAL_CID_RE.fullmatch(text or ""):
            raise InvalidCid(f"not a local sha2-256 CID: {text!r}")
        mh = b58decode(text)
        if len(mh) != 34 or mh[0] != SHA2_256 or mh[1] != SHA2_256_LEN:
            raise InvalidCid(f"CID {text!r} does not decode to a sha2-256 multihash")
        return cls(text, BackendKind.LOCAL)

    @property
    def digest(self) -> bytes:
        """The embedded SHA-256 digest (local CIDs only)."""
        if self.backend_kind is not BackendKind.LOCAL:
            raise InvalidCid("remote CIDs are opaque")
        return b58decode(self.text)[2:]


@dataclass(frozen=True)
class ContentStat:
    size_bytes: int
    pinned: bool
    created_at: Optional[datetime]


def _utc_ms(ns: int) -> datetime:
    return datetime.fromtimestamp((ns // 1_000_000) / 1000, tz=timezone.utc)


class LocalStore:
    """One file per object under ``root/objects/<xy>/<cid>``.

    ``xy`` are the two characters after the constant "Qm" prefix. Pins are
    kept in ``root/pins.jsonl``, an append-only journal of pin/unpin entries.
    """

    kind = BackendKind.LOCAL

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.objects = self.root / "objects"
        self.objects.mkdir(parents=True, exist_ok=True)
        self._tmp = self.root / "tmp"
        self._tmp.mkdir(exist_ok=True)
        self._pin_journal = self.root / "pins.jsonl"
        self._pin_lock = threading.Lock()
        self._pins: set[str] = set()
        if self._pin_journal.exists():
            for _, entry in _journal.read(self._pin_journal):
                if entry.get("op") == "pin":
                    self._pins.add(entry["cid"])
                elif entry.get("op") == "unpin":
                    self._pins.discard(entry["cid"])

    def __repr__(self) -> str:
        return f"LocalStore({str(self.root)!r})"

    def parse_cid(self, cid: Cid | str) -> Cid:
        text = cid.text if isinstance(cid, Cid) else cid
        return Cid.parse_local(text)

    def object_path(self, cid: Cid | str) -> Path:
        cid = self.parse_cid(cid)
        return self.objects / cid.text[2:4] / cid.text

    def put(self, content: bytes) -> tuple[Cid, UploadMetrics]:
        return self.put_stream(io.BytesIO(content))

    def put_file(self, path: Path | str) -> tuple[Cid, UploadMetrics]:
        with open(path, "rb") as fh:
            return self.put_stream(fh)

    def put_stream(self, stream: BinaryIO) -> tuple[Cid, UploadMetrics]:
        start = time.perf_counter()
        h = hashlib.sha256()
        size = 0
        tmp_path = self._tmp / f"{uuid.uuid4().hex}.part"
        try:
            with open(tmp_path, "wb") as out:
                while chunk := stream.read(CHUNK_SIZE):
                    h.update(chunk)
                    out.write(chunk)
                    size += len(chunk)
                out.flush()
                os.fsync(out.fileno())
            cid = Cid.from_digest(h.digest())
            dest = self.objects / cid.text[2:4] / cid.text
            dest.parent.mkdir(exist_ok=True)
            # identical bytes either way, so a concurrent writer of the same object is harmless
            os.replace(tmp_path, dest)
        except OSError as exc:
            tmp_path.unlink(missing_ok=True)
            raise StorageFull(f"cannot write object to {self.objects}: {exc}") from exc
        elapsed = time.perf_counter() - start
        if size == 0:
            logger.info("stored empty content as %s", cid.text)
        return cid, UploadMetrics.from_timing(size, elapsed)

    def get_timed(self, cid: Cid | str, verify: bool = True) -> tuple[bytes, float]:
        start = time.perf_counter()
        cid = self.parse_cid(cid)
        path = self.object_path(cid)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise ContentNotFound(f"no object for {cid.text}") from None
        if verify and hashlib.sha256(data).digest() != cid.digest:
            raise IntegrityMismatch(f"object {path} no longer hashes to {cid.text}")
        return data, time.perf_counter() - start

    def get(self, cid: Cid | str, verify: bool = True) -> bytes:
        return self.get_timed(cid, verify=verify)[0]

    def stat(self, cid: Cid | str) -> ContentStat:
        cid = self.parse_cid(cid)
        try:
            st = self.object_path(cid).stat()
        except FileNotFoundError:
            raise ContentNotFound(f"no object for {cid.text}") from None
        return ContentStat(st.st_size, cid.text in self._pins, _utc_ms(st.st_mtime_ns))

    def pin(self, cid: Cid | str) -> ContentStat:
        cid = self.parse_cid(cid)
        self.stat(cid)  # raises ContentNotFound
        with self._pin_lock:
            if cid.text not in self._pins:
                _journal.append(self._pin_journal, {"op": "pin", "cid": cid.text})
                self._pins.add(cid.text)
        return self.stat(cid)

    def unpin(self, cid: Cid | str) -> None:
        cid = self.parse_cid(cid)
        with self._pin_lock:
            if cid.text in self._pins:
                _journal.append(self._pin_journal, {"op": "unpin", "cid": cid.text})
                self._pins.discard(cid.text)

    def is_pinned(self, cid: Cid | str) -> bool:
        return self.parse_cid(cid).text in self._pins

    def iter_cids(self) -> Iterator[Cid]:
        for sub in sorted(self.objects.iterdir()):
            if sub.is_dir():
                for obj in sorted(sub.iterdir()):
                    if LOCAL_CID_RE.fullmatch(obj.name):
                        yield Cid(obj.name, BackendKind.LOCAL)

    def gc(self) -> list[Cid]:
        """Delete every unpinned object; returns what was removed."""
        removed = []
        for cid in list(self.iter_cids()):
            if cid.text not in self._pins:
                self.object_path(cid).unlink(missing_ok=True)
                removed.append(cid)
        return removed


class RemoteStore:
    """Client for an IPFS daemon's HTTP RPC API (``/api/v0``) and gateway.

    With ``read_via_gateway`` set, reads go to ``GET <gateway>/ipfs/<cid>``
    instead of ``POST /api/v0/cat``.
    """

    kind = BackendKind.REMOTE

    def __init__(
        self,
        api_url: str = "http://127.0.0.1:5001",
        gateway_url: str = "http://127.0.0.1:8080",
        read_via_gateway: bool = False,
        timeout: float = 60.0,
    ):
        import requests

        self._requests = requests
        self.api_url = api_url.rstrip("/")
        self.gateway_url = gateway_url.rstrip("/")
        self.read_via_gateway = read_via_gateway
        self.timeout = timeout
        self.session = requests.Session()

    def __repr__(self) -> str:
        return f"RemoteStore({self.api_url!r}, gateway={self.gateway_url!r})"

    def parse_cid(self, cid: Cid | str) -> Cid:
        text = cid.text if isinstance(cid, Cid) else cid
        if not text or any(c.isspace() or c in "/?&#" for c in text):
            raise InvalidCid(f"malformed CID {text!r}")
        return Cid(text, BackendKind.REMOTE)

    def _call(self, method: str, url: str, **kw):
        try:
            resp = self.session.request(method, url, timeout=self.timeout, **kw)
        except (self._requests.ConnectionError, self._requests.Timeout) as exc:
            raise BackendUnreachable(f"IPFS daemon unreachable at {url}: {exc}") from exc
        if resp.status_code >= 400:
            self._raise_for(resp)
        return resp

    @staticmethod
    def _raise_for(resp) -> None:
        try:
            message = resp.json().get("Message", resp.text)
        except ValueError:
            message = resp.text
        lowered = message.lower()
        if resp.status_code == 404 or "not found" in lowered or "no link named" in lowered:
            raise ContentNotFound(message)
        if "invalid" in lowered and "cid" in lowered:
            raise InvalidCid(message)
        if resp.status_code in (502, 503, 504):
            raise BackendUnreachable(f"daemon returned {resp.status_code}: {message}")
        raise CasError(f"daemon returned {resp.status_code}: {message}")

    def ping(self) -> str:
        """Daemon version string; raises BackendUnreachable if it is down."""
        return self._call("POST", f"{self.api_url}/api/v0/version").json().get("Version", "")

    def put(self, content: bytes) -> tuple[Cid, UploadMetrics]:
        return self.put_stream(io.BytesIO(content), filename="blob")

    def put_file(self, path: Path | str) -> tuple[Cid, UploadMetrics]:
        with open(path, "rb") as fh:
            return self.put_stream(fh, filename=Path(path).name)

    def put_stream(self, stream: BinaryIO, filename: str = "file") -> tuple[Cid, UploadMetrics]:
        boundary = uuid.uuid4().hex
        sent = {"size": 0, "done": None}
        disposition = f'form-data; name="file"; filename="{filename}"'

        def body() -> Iterator[bytes]:
            yield (
                f"--{boundary}\r\nContent-Disposition: {disposition}\r\n"
                "Content-Type: application/octet-stream\r\n\r\n"
            ).encode()
            while chunk := stream.read(CHUNK_SIZE):
                sent["size"] += len(chunk)
                yield chunk
            yield f"\r\n--{boundary}--\r\n".encode()
            sent["done"] = time.perf_counter()

        start = time.perf_counter()
        resp = self._call(
            "POST",
            f"{self.api_url}/api/v0/add",
            params={"pin": "false", "quieter": "true"},
            data=body(),
            headers={"Content-Type": f"multipart/form-data; boundary={boundary}"},
        )
        end = time.perf_counter()
        cid_text = None
        # add may stream progress objects; the final one carries the Hash
        for line in resp.text.splitlines():
            if line.strip():
                try:
                    obj = json.loads(line)
                except ValueError:
                    continue
                cid_text = obj.get("Hash", cid_text)
        if not cid_text:
            raise CasError(f"add response carried no Hash: {resp.text[:200]!r}")
        send_done = sent["done"] or end
        metrics = UploadMetrics.from_timing(
            sent["size"],
            end - start,
            processing_time_s=send_done - start,
            network_time_s=end - send_done,
        )
        return Cid(cid_text, BackendKind.REMOTE), metrics

    def get_timed(self, cid: Cid | str, verify: bool = True) -> tuple[bytes, float]:
        # verify is accepted for interface parity; remote CIDs are not recomputed
        cid = self.parse_cid(cid)
        start = time.perf_counter()
        if self.read_via_gateway:
            resp = self._call("GET", f"{self.gateway_url}/ipfs/{cid.text}")
        else:
            resp = self._call("POST", f"{self.api_url}/api/v0/cat", params={"arg": cid.text})
        return resp.content, time.perf_counter() - start

    def get(self, cid: Cid | str, verify: bool = True) -> bytes:
        return self.get_timed(cid, verify)[0]

    def pin(self, cid: Cid | str) -> ContentStat:
        cid = self.parse_cid(cid)
        self._call("POST", f"{self.api_url}/api/v0/pin/add", params={"arg": cid.text})
        return self.stat(cid)

    def is_pinned(self, cid: Cid | str) -> bool:
        cid = self.parse_cid(cid)
        try:
            resp = self._call(
                "POST", f"{self.api_url}/api/v0/pin/ls", params={"arg": cid.text, "type": "recursive"}
            )
        except CasError as exc:
            if isinstance(exc, BackendUnreachable) or "not pinned" not in str(exc):
                raise
            return False
        return cid.text in resp.json().get("Keys", {})

    def stat(self, cid: Cid | str) -> ContentStat:
        cid = self.parse_cid(cid)
        resp = self._call(
            "POST", f"{self.api_url}/api/v0/files/stat", params={"arg": f"/ipfs/{cid.text}"}
        )
        info = resp.json()
        # daemon does not expose creation time
        return ContentStat(int(info.get("Size", 0)), self.is_pinned(cid), None)


def open_store(kind: str | BackendKind, **kw) -> LocalStore | RemoteStore:
    kind = BackendKind(kind)
    if kind is BackendKind.LOCAL:
        root = kw.get("root") or Path(tempfile.gettempdir()) / "cidchain-store"
        return LocalStore(root)
    return RemoteStore(
        api_url=kw.get("api_url") or "http://127.0.0.1:5001",
        gateway_url=kw.get("gateway_url") or "http://127.0.0.1:8080",
        read_via_gateway=bool(kw.get("read_via_gateway", False)),
    )
