import socket

import pytest

from cidchain.cas import BackendKind, BackendUnreachable, ContentNotFound, RemoteStore, open_store

from fake_ipfs import FakeIpfs


@pytest.fixture
def daemon():
    with FakeIpfs() as fake:
        yield fake


@pytest.fixture
def remote(daemon):
    # the fake serves the API and the gateway on one port
    return RemoteStore(api_url=daemon.url, gateway_url=daemon.url, timeout=5)


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_add_uses_daemon_cid(remote, daemon):
    cid, m = remote.put(b"hello remote")
    assert cid.backend_kind is BackendKind.REMOTE
    assert cid.text.startswith("bafk")  # daemon's CID, never recomputed
    assert daemon.blocks[cid.text] == b"hello remote"
    assert m.size_bytes == len(b"hello remote")
    assert m.upload_time_s > 0
    assert m.processing_time_s is not None and m.network_time_s is not None
    assert m.processing_time_s + m.network_time_s == pytest.approx(m.upload_time_s)
    assert ("POST", "/api/v0/add") in daemon.requests
    assert daemon.chunked_uploads == 1


def test_put_file_round_trip_via_cat(remote, tmp_path, monkeypatch):
    monkeypatch.setattr("cidchain.cas.CHUNK_SIZE", 4096)
    data = bytes(range(256)) * 100
    src = tmp_path / "f.bin"
    src.write_bytes(data)
    cid, _ = remote.put_file(src)
    assert remote.get(cid) == data


def test_gateway_reads(daemon):
    store = RemoteStore(api_url=daemon.url, gateway_url=daemon.url, read_via_gateway=True)
    cid, _ = store.put(b"via gateway")
    assert store.get(cid) == b"via gateway"
    assert ("GET", f"/ipfs/{cid.text}") in daemon.requests


def test_pin_and_stat(remote, daemon):
    cid, _ = remote.put(b"x" * 152)
    st = remote.stat(cid)
    assert st.size_bytes == 152 and not st.pinned
    assert remote.pin(cid).pinned
    assert remote.pin(cid).pinned
    assert cid.text in daemon.pins


def test_unknown_cid_not_found(remote):
    with pytest.raises(ContentNotFound):
        remote.get("bafkdoesnotexist")
    with pytest.raises(ContentNotFound):
        remote.pin("bafkdoesnotexist")
    with pytest.raises(ContentNotFound):
        remote.stat("bafkdoesnotexist")


def test_unreachable_daemon_is_retriable():
    store = RemoteStore(api_url=f"http://127.0.0.1:{_free_port()}", timeout=2)
    with pytest.raises(BackendUnreachable) as info:
        store.put(b"data")
    assert info.value.retriable
    with pytest.raises(BackendUnreachable):
        store.ping()


def test_ping(remote):
    assert remote.ping() == "0.34.1-fake"


def test_open_store_remote_defaults():
    store = open_store("remote")
    assert store.api_url == "http://127.0.0.1:5001"
    assert store.gateway_url == "http://127.0.0.1:8080"
