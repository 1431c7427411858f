"""Acceptance criteria, one or more tests each, reported in the terminal summary.

Each test wraps its assertions in ``criterion(number, title)`` so the run ends
with a ``[PASS]``/``[FAIL]``/``[SKIP]`` line per criterion.
"""

import dataclasses
import hashlib
import os
import random
import signal
import statistics
import subprocess
import sys
import time
from pathlib import Path

import base58
import pytest
from hypothesis import given, settings, strategies as st

from cidchain import _journal
from cidchain.cas import LocalStore, RemoteStore, BackendUnreachable
from cidchain.ledger import IndexOutOfRange, Ledger, deploy
from cidchain.lightchain import Chain, Verdict, check_links, genesis, load as load_chain
from cidchain.metrics import MIB, EnergySample, FakeProbe, ReportSchema, UploadMetrics, measure_upload, read_report
from cidchain.pipeline import (
    DEFAULT_USER, Pipeline, PipelineConfig, bench, compare_phases, dummy_file_name, write_dummy_file,
)
from cidchain.watcher import WatchConfig

pytestmark = pytest.mark.acceptance

GOLDEN_GENESIS = "ee71c230f841f72f041126787d092cce1eab67e07d472e20dca07cd706f3120e"
LADDER_SIZES = [5, 10, 20, 35, 55, 80, 110, 145, 185, 230, 280, 335, 395, 460, 530]


def recurrence_oracle(start, gap, max_size):
    """Closed form of the ladder: k-th size = start + k*gap + 5*k*(k-1)/2."""
    sizes, k = [], 0
    while True:
        s = start + k * gap + 5 * k * (k - 1) // 2
        if s > max_size:
            return sizes
        sizes.append(s)
        k += 1


# ---- 1 ----

def test_generator_fidelity(criterion, tmp_path):
    with criterion("1", "generator fidelity: gen 5 5 550 -> 15 files, 5..530 MB, < 60 s"):
        out = tmp_path / "gen"
        t0 = time.perf_counter()
        proc = subprocess.run([sys.executable, "-m", "cidchain", "gen", "5", "5", "550", "--out", str(out)],
                              capture_output=True, text=True, timeout=120)
        elapsed = time.perf_counter() - t0
        assert proc.returncode == 0, proc.stderr
        oracle = recurrence_oracle(5, 5, 550)
        assert oracle == LADDER_SIZES
        files = sorted(out.iterdir(), key=lambda p: p.stat().st_size)
        assert len(files) == 15
        assert [p.stat().st_size for p in files] == [s * MIB for s in oracle]
        assert [p.name for p in files] == [dummy_file_name(s) for s in oracle]
        assert elapsed < 60


# ---- 2 ----

def test_gas_calibration(criterion, tmp_path):
    with criterion("2", "gas calibration: 46-byte CIDs -> 752110 gas / 654008 tx cost"):
        ledger, deploy_receipt = deploy()
        store = LocalStore(tmp_path / "store")
        cids = [store.put(f"file {i}".encode())[0].text for i in range(3)]
        assert all(len(c.encode()) == 46 for c in cids)
        blocks = [deploy_receipt.block_number]
        for cid in cids:
            receipt, _ = ledger.store_data(DEFAULT_USER, cid)
            assert receipt.gas_used == 752110
            assert receipt.tx_cost_units == 654008
            blocks.append(receipt.block_number)
        assert [b - a for a, b in zip(blocks, blocks[1:])] == [1, 1, 1]


# ---- 3 ----

def test_tamper_evidence(criterion, tmp_path):
    with criterion("3", "tamper evidence: 4 blocks Verified, flip -> one Tampered, delete -> Unavailable, < 5 s"):
        t0 = time.perf_counter()
        store = LocalStore(tmp_path / "store")
        chain = Chain.create(tmp_path / "chain.jsonl")
        cids = []
        for i in range(4):
            f = tmp_path / f"file{i}.bin"
            f.write_bytes(os.urandom(1000 + i))
            cid, _ = store.put_file(f)
            store.pin(cid)
            chain.save_to_chain(cid, store)
            cids.append(cid)
        assert [v.verdict for v in chain.verify_chain(store)] == [Verdict.VERIFIED] * 4

        obj = store.object_path(cids[1])
        raw = bytearray(obj.read_bytes())
        raw[random.randrange(len(raw))] ^= 0x01
        obj.write_bytes(bytes(raw))
        assert [v.verdict for v in chain.verify_chain(store)] == [
            Verdict.VERIFIED, Verdict.TAMPERED, Verdict.VERIFIED, Verdict.VERIFIED]

        store.object_path(cids[3]).unlink()
        assert [v.verdict for v in chain.verify_chain(store)] == [
            Verdict.VERIFIED, Verdict.TAMPERED, Verdict.VERIFIED, Verdict.UNAVAILABLE]
        assert time.perf_counter() - t0 < 5


# ---- 4 ----

FIELD_MUTATIONS = {
    "index": lambda b: dataclasses.replace(b, index=b.index + 1),
    "timestamp_ms": lambda b: dataclasses.replace(b, timestamp_ms=b.timestamp_ms + 1),
    "cid": lambda b: dataclasses.replace(b, cid=b.cid + "Z"),
    "data_hash": lambda b: dataclasses.replace(b, data_hash=hashlib.sha256(b"other").hexdigest()),
    "prev_hash": lambda b: dataclasses.replace(b, prev_hash="1" * 64),
    "block_hash": lambda b: dataclasses.replace(b, block_hash="2" * 64),
}


def test_chain_link_integrity(criterion, tmp_path):
    with criterion("4", "chain-link integrity: mutation fails at index <= k, replay identical, genesis golden"):
        assert genesis().block_hash == GOLDEN_GENESIS
        store = LocalStore(tmp_path / "store")
        chain = Chain.create(tmp_path / "chain.jsonl")
        for i in range(8):
            chain.save_to_chain(store.put(os.urandom(64))[0], store)
        blocks = chain.blocks
        assert check_links(blocks)

        @given(st.integers(0, len(blocks) - 1), st.sampled_from(sorted(FIELD_MUTATIONS)))
        @settings(max_examples=300, deadline=None)
        def mutated_fails_at_or_before_k(k, field):
            bad = list(blocks)
            bad[k] = FIELD_MUTATIONS[field](bad[k])
            result = check_links(bad)
            assert not result and result.failing_index <= k

        mutated_fails_at_or_before_k()

        replayed = load_chain(tmp_path / "chain.jsonl")
        assert [b.block_hash for b in replayed] == [b.block_hash for b in blocks]
        assert [b.recompute_hash() for b in replayed] == [b.block_hash for b in blocks]


# ---- 5 ----

def test_cid_correctness(criterion, tmp_path):
    with criterion("5", "CID correctness: hello world vs reference, 1000 random round trips"):
        store = LocalStore(tmp_path / "store")
        reference = base58.b58encode(b"\x12\x20" + hashlib.sha256(b"hello world").digest()).decode()
        cid, _ = store.put(b"hello world")
        assert cid.text == reference == "QmaozNR7DZHQK1ZcU9p7QdrshMvXqWK6gpu5rmrkPdT3L4"

        @given(st.binary(max_size=4096))
        @settings(max_examples=1000, deadline=None)
        def round_trip(data):
            c, _ = store.put(data)
            assert store.get(c) == data
            assert c.text == base58.b58encode(b"\x12\x20" + hashlib.sha256(data).digest()).decode()

        round_trip()


# ---- 6 & 7 share one bench run ----

@pytest.fixture(scope="module")
def desk_bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    return bench([1, 4, 16, 64], out_dir=out, repeats=5, probe=FakeProbe([20, 40]), tdp_watts=65)


def test_metric_identities(criterion, desk_bench):
    with criterion("6", "metric identities: bandwidth x time = size_kb (1e-6), fake-probe energy 195.0"):
        _, rows = read_report(desk_bench.paths["perf_table11"])
        assert rows
        for row in rows:
            size_kb = float(row["Size (MB)"]) * 1024
            t, bw = float(row["Time (s)"]), float(row["Bandwidth (KB/s)"])
            assert bw * t == pytest.approx(size_kb, rel=1e-6)
        for size, times in desk_bench.upload_times.items():
            for t in times:
                m = UploadMetrics.from_timing(int(size * MIB), t)
                assert m.bandwidth_kb_s * t == pytest.approx(m.size_kb, rel=1e-6)

        clock = iter([0.0, 10.0]).__next__

        class NullStore:
            def put_file(self, path):
                return "QmNull", UploadMetrics.from_timing(0, 10.0)

        _, _, energy = measure_upload(Path("unused"), NullStore(), FakeProbe([20, 40]), tdp_watts=65, clock=clock)
        assert energy.energy_j == 195.0
        assert EnergySample.from_readings(20, 40, 10, 65).energy_j == 195.0


def test_desk_scale_trend(criterion, desk_bench):
    with criterion("7", "desk-scale trend: 1/4/16/64 MiB medians strictly increasing, table7 header exact"):
        medians = [statistics.median(desk_bench.upload_times[float(s)]) for s in (1, 4, 16, 64)]
        assert all(len(desk_bench.upload_times[float(s)]) == 5 for s in (1, 4, 16, 64))
        assert all(a < b for a, b in zip(medians, medians[1:])), medians
        header = desk_bench.paths["upload_table7"].read_bytes().split(b"\n", 1)[0]
        assert header == b"File Size (MB),Uploading Time (s),Power Consumption (J),Memory (MB)"
        assert header.decode().split(",") == list(ReportSchema.UPLOAD_TABLE7.headers)


# ---- 8 ----

def test_phase_ordering(criterion, tmp_path):
    with criterion("8", "phase ordering: lightchain-path median <= ledger-path median, 20 paired trials"):
        files = []
        for i, size in enumerate((1, 2, 4)):
            files.append(write_dummy_file(tmp_path / "in" / f"f{size}.bin", size * MIB, "random", seed=i))
        result = compare_phases(files, tmp_path / "work", trials=20)
        assert len(result.phase1_s) == len(result.phase2_s) == 20
        assert result.phase2_median <= result.phase1_median, (result.phase1_median, result.phase2_median)


# ---- 9 ----

def test_contract_semantics(criterion):
    with criterion("9", "contract semantics: index >= count errors, counts per user, isolation"):
        alice, bob = "0x" + "a" * 40, "0x" + "b" * 40
        ledger, _ = deploy()
        for i in range(4):
            ledger.store_data(alice, f"Qm{i:044d}")
            assert ledger.get_data_count(alice) == i + 1
        assert ledger.get_data_count(bob) == 0
        for bad in (4, 5, 100):
            with pytest.raises(IndexOutOfRange):
                ledger.retrieve_data(alice, bad)
        with pytest.raises(IndexOutOfRange):
            ledger.retrieve_data(bob, 0)
        ledger.store_data(bob, "Qm" + "9" * 44)
        assert ledger.get_data_count(bob) == 1 and ledger.get_data_count(alice) == 4
        assert ledger.retrieve_data(bob, 0)[0] == "Qm" + "9" * 44


# ---- 10 ----

def _check_consistent(state_dir: Path, store_dir: Path) -> tuple[list[str], list[str]]:
    """Reload both journals, validate them, and return (ledger cids, chain cids)."""
    ledger = Ledger.open(state_dir / "ledger.jsonl")
    chain = load_chain(state_dir / "chain.jsonl")
    assert chain.verify_links()
    store = LocalStore(store_dir)
    ledger_cids = [r.ipfs_hash for r in ledger.records(DEFAULT_USER)]
    chain_cids = [b.cid for b in chain.blocks[1:]]
    assert len(set(ledger_cids)) == len(ledger_cids)
    assert len(set(chain_cids)) == len(chain_cids)
    for cid in ledger_cids:
        store.get(cid)  # committed content is present and intact
    # the ledger commits before the chain, so the chain is a prefix of it
    # with at most the in-flight file missing
    assert chain_cids == ledger_cids[: len(chain_cids)]
    assert len(ledger_cids) - len(chain_cids) <= 1
    for block in chain.blocks[1:]:
        assert hashlib.sha256(store.get(block.cid)).hexdigest() == block.data_hash
    return ledger_cids, chain_cids


def _line_count(path: Path) -> int:
    try:
        return path.read_bytes().count(b"\n")
    except FileNotFoundError:
        return 0


def test_crash_consistency_sigkill(criterion, tmp_path):
    with criterion("10", "crash consistency: kill between commits, reload validates, only committed entries"):
        files = [write_dummy_file(tmp_path / "in" / f"f{i:03d}.bin", 256 * 1024, "random", seed=i)
                 for i in range(120)]
        state, store = tmp_path / "state", tmp_path / "state" / "store"
        cmd = [sys.executable, "-m", "cidchain", "upload", *map(str, files), "--state-dir", str(state),
               "--report-dir", str(tmp_path / "reports"), "--probe", "none"]
        kills = 0
        for threshold in (4, 20, 45):
            proc = subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)
            deadline = time.monotonic() + 60
            while _line_count(state / "ledger.jsonl") < threshold and proc.poll() is None:
                assert time.monotonic() < deadline
                time.sleep(0.001)
            if proc.poll() is None:
                os.kill(proc.pid, signal.SIGKILL)
                kills += 1
            proc.wait()
            # reopening with recovery is what a restarted pipeline does
            Pipeline(PipelineConfig(WatchConfig(tmp_path), state_dir=state, probe="none"), recover=True)
            ledger_cids, _ = _check_consistent(state, store)
            assert len(ledger_cids) <= len(files)
        assert kills >= 1, "the upload finished before any kill landed"

        proc = subprocess.run(cmd, capture_output=True, text=True, timeout=300)
        assert proc.returncode == 0, proc.stderr
        ledger_cids, chain_cids = _check_consistent(state, store)
        assert len(ledger_cids) == len(chain_cids) == len(files)


class SimulatedCrash(BaseException):
    """Stands in for SIGKILL: not an OSError, so no cleanup handler runs."""


@pytest.mark.parametrize("journal", ["ledger", "chain"])
def test_crash_consistency_torn_append(criterion, tmp_path, monkeypatch, journal):
    with criterion("10", "crash consistency: kill between commits, reload validates, only committed entries"):
        cfg = PipelineConfig(WatchConfig(tmp_path), state_dir=tmp_path / "state", probe="none")
        files = [write_dummy_file(tmp_path / "in" / f"f{i}.bin", 5000, "random", seed=i) for i in range(5)]
        pipe = Pipeline(cfg, recover=True)
        for f in files[:2]:
            assert pipe.process_file(f).ok

        target = str(cfg.ledger_path if journal == "ledger" else cfg.chain_path)
        real_write, real_open = os.write, os.open
        fds = {}

        def tracking_open(path, *a, **k):
            fd = real_open(path, *a, **k)
            fds[fd] = str(path)
            return fd

        def torn_write(fd, data):
            if fds.get(fd) == target:
                real_write(fd, data[: len(data) // 2])
                raise SimulatedCrash()
            return real_write(fd, data)

        monkeypatch.setattr(_journal.os, "open", tracking_open)
        monkeypatch.setattr(_journal.os, "write", torn_write)
        with pytest.raises(SimulatedCrash):
            pipe.process_file(files[2])
        monkeypatch.undo()

        # the raw journal is torn; plain reload refuses it, recovery cuts it
        with pytest.raises(_journal.JournalCorrupt):
            (Ledger.open if journal == "ledger" else load_chain)(Path(target))
        restarted = Pipeline(cfg, recover=True)
        ledger_cids, chain_cids = _check_consistent(cfg.state_dir, cfg.state_dir / "store")
        assert len(ledger_cids) == (2 if journal == "ledger" else 3)
        assert len(chain_cids) == 2

        for f in files:
            assert restarted.process_file(f).ok
        ledger_cids, chain_cids = _check_consistent(cfg.state_dir, cfg.state_dir / "store")
        assert len(ledger_cids) == len(chain_cids) == 5


# ---- 11 ----

def test_live_daemon(criterion, tmp_path):
    with criterion("11", "live IPFS daemon: add/cat/pin round trip, gateway returns identical bytes"):
        store = RemoteStore("http://127.0.0.1:5001", "http://127.0.0.1:8080", timeout=10)
        try:
            store.ping()
        except BackendUnreachable:
            pytest.skip("no IPFS daemon on 127.0.0.1:5001")
        data = os.urandom(300_000)
        cid, _ = store.put(data)
        assert store.get(cid) == data
        assert store.pin(cid).pinned and store.is_pinned(cid)
        gateway = RemoteStore("http://127.0.0.1:5001", "http://127.0.0.1:8080", read_via_gateway=True, timeout=10)
        assert gateway.get(cid) == data
