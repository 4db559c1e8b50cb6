import os
import threading

import pytest

from pilotdata.coordination import GLOBAL, CoordinationStore, StoreClient, StoreServer, key_for, short_id
from pilotdata.errors import ConflictError, IntegrityError, NotFoundError


def test_ids_and_keys():
    store = CoordinationStore()
    cu = store.next_id("cu")
    assert cu == "ps://local/cu/1"
    assert key_for(cu) == "cu/1"
    assert short_id(cu) == "cu-1"
    assert store.next_id("cu") == "ps://local/cu/2"


def test_versions_and_update():
    store = CoordinationStore()
    store.put_state("k", 1)
    store.update("k", lambda v: v + 1)
    assert store.get_versioned("k") == (2, 2)
    assert store.incr("n") == 1 and store.incr("n", 5) == 6
    with pytest.raises(NotFoundError):
        store.get_state("missing")


def test_pilot_queue_has_priority_over_global():
    store = CoordinationStore()
    store.register_pilot("p1")
    store.enqueue(GLOBAL, "g1")
    store.enqueue("p1", "a1")
    assert store.pull("p1") == "a1"
    assert store.pull("p1") == "g1"
    assert store.pull("p1") is None


def test_double_enqueue_and_claimed_rejected():
    store = CoordinationStore()
    store.register_pilot("p1")
    store.enqueue(GLOBAL, "x")
    with pytest.raises(ConflictError):
        store.enqueue("p1", "x")
    store.pull("p1")
    with pytest.raises(ConflictError):
        store.enqueue(GLOBAL, "x")
    store.release("x")
    store.enqueue(GLOBAL, "x")


def test_exactly_once_across_threads():
    store = CoordinationStore(keep_history=True)
    pilots = [f"p{i}" for i in range(4)]
    for p in pilots:
        store.register_pilot(p)
    for i in range(500):
        store.enqueue(pilots[i % 4] if i % 3 else GLOBAL, f"cu{i}")
    got = {p: [] for p in pilots}

    def worker(p):
        while (cu := store.pull(p)) is not None:
            got[p].append(cu)

    threads = [threading.Thread(target=worker, args=(p,)) for p in pilots]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    delivered = [c for items in got.values() for c in items]
    assert sorted(delivered) == sorted(f"cu{i}" for i in range(500))
    assert all(not (src == GLOBAL and own) for _, _, src, own in store.history)


def test_blocking_pull_wakes_on_enqueue():
    store = CoordinationStore()
    store.register_pilot("p")
    result = []
    t = threading.Thread(target=lambda: result.append(store.pull("p", timeout=5)))
    t.start()
    store.enqueue(GLOBAL, "late")
    t.join(5)
    assert result == ["late"]


def test_drop_queue_returns_leftovers():
    store = CoordinationStore()
    store.register_pilot("p")
    store.enqueue("p", "a")
    store.enqueue("p", "b")
    assert store.drop_queue("p") == ["a", "b"]
    assert store.queue_of("a") is None


def test_snapshot_restore_is_byte_identical(tmp_path):
    path = tmp_path / "s.snap"
    store = CoordinationStore(snapshot_path=path)
    store.register_pilot("p")
    store.put_state("cu/1", {"state": "NEW"})
    store.next_id("cu")
    store.enqueue("p", "a")
    store.enqueue(GLOBAL, "b")
    store.pull("p")
    before = store.snapshot_bytes()
    store.close()  # journal only, no fresh snapshot: replay has to reproduce the state
    restored = CoordinationStore.restore(path)
    assert restored.snapshot_bytes() == before
    assert restored.claimed_by("a") == "p"


def test_periodic_mode_loses_only_unsnapshotted_writes(tmp_path):
    path = tmp_path / "s.snap"
    store = CoordinationStore(snapshot_path=path, snapshot_every=3600)
    store.put_state("a", 1)
    store.snapshot()
    store.put_state("b", 2)
    restored = CoordinationStore.restore(path)
    assert restored.get_state("a") == 1
    assert restored.get_state("b", None) is None


@pytest.mark.parametrize("damage", ["truncate", "flip"])
def test_corrupt_snapshot_detected(tmp_path, damage):
    path = tmp_path / "s.snap"
    store = CoordinationStore(snapshot_path=path)
    for i in range(20):
        store.put_state(f"k{i}", "v" * 30)
    store.snapshot()
    data = bytearray(path.read_bytes())
    if damage == "truncate":
        data = data[: len(data) // 2]
    else:
        data[len(data) // 2] ^= 0xFF
    path.write_bytes(bytes(data))
    os.unlink(str(path) + ".journal")
    with pytest.raises(IntegrityError):
        CoordinationStore.restore(path)


def test_socket_front_end(tmp_path):
    store = CoordinationStore()
    sock = tmp_path / "store.sock"
    server = StoreServer(store, sock)
    thread = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
    thread.start()
    try:
        client = StoreClient(sock)
        unit = client.next_id("cu")
        client.put_state(key_for(unit), {"x": 1})
        client.register_pilot("p")
        client.enqueue("p", unit)
        assert client.store_name() == "local"
        assert store.pull("p") == unit
        with pytest.raises(ConflictError):
            client.enqueue(GLOBAL, unit)
        with pytest.raises(AttributeError):
            client.not_an_op
        client.close()
    finally:
        server.shutdown()
        server.server_close()
