"""Shared control plane: versioned key/value state plus CU hand-off queues.

Every operation runs under one lock, which makes the store linearizable.
Agents pull from their own queue first and fall back to the global queue.

Durability comes from two files next to each other:

* ``<path>`` is a full snapshot;
* ``<path>.journal`` holds every mutation since that snapshot (write-through
  mode).

Both use the same framing: a magic line, then records of the form
``<decimal length>\\n<json payload>\\n``. A snapshot ends with an ``end``
record so truncation is detected.
"""

import copy
import itertools
import json
import logging
import os
import socket
import socketserver
import threading
import time
from collections import deque
from urllib.parse import urlsplit

from .errors import ConflictError, IntegrityError, NotFoundError, PilotDataError, ValidationError

logger = logging.getLogger(__name__)

GLOBAL = "global"
SUBMISSIONS = "submissions"  # CUs recorded by out-of-process submitters
SNAPSHOT_MAGIC = b"PSNAP1\n"
JOURNAL_MAGIC = b"PJRNL1\n"
COMPACT_EVERY = 4096
_MISSING = object()


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _frame(obj):
    payload = _dumps(obj)
    return str(len(payload)).encode() + b"\n" + payload + b"\n"


def _read_records(data, magic, what):
    if not data.startswith(magic):
        raise IntegrityError(f"{what}: bad or missing header", offset=0)
    pos = len(magic)
    while pos < len(data):
        start = pos
        nl = data.find(b"\n", pos, pos + 24)
        if nl < 0 or not data[pos:nl].isdigit():
            raise IntegrityError(f"{what}: malformed record length", offset=start)
        size = int(data[pos:nl])
        body_end = nl + 1 + size
        if body_end + 1 > len(data) or data[body_end:body_end + 1] != b"\n":
            raise IntegrityError(f"{what}: truncated record", offset=start)
        try:
            yield start, json.loads(data[nl + 1:body_end])
        except ValueError:
            raise IntegrityError(f"{what}: undecodable record", offset=start) from None
        pos = body_end + 1


def parse_url(unit_id):
    """Split ``ps://<store>/<kind>/<n>`` into ``(store, kind, n)``."""
    parts = urlsplit(unit_id)
    bits = parts.path.strip("/").split("/")
    if parts.scheme != "ps" or len(bits) != 2 or not all(bits):
        raise NotFoundError(f"not a store address: {unit_id!r}")
    return parts.netloc, bits[0], bits[1]


def short_id(unit_id):
    """Filesystem-friendly ``<kind>-<n>`` form of a store address."""
    if unit_id.startswith("ps://"):
        _, kind, n = parse_url(unit_id)
        return f"{kind}-{n}"
    return unit_id.replace("/", "-").replace(":", "-")


def key_for(unit_id):
    """kv key holding the record of a unit or pilot address."""
    if unit_id.startswith("ps://"):
        _, kind, n = parse_url(unit_id)
        return f"{kind}/{n}"
    return unit_id


class Handle:
    """Live view of one unit or pilot record in a store."""

    def __init__(self, store, unit_id):
        self.store = store
        self.id = unit_id
        self.key = key_for(unit_id)

    @property
    def record(self):
        return self.store.get_state(self.key)

    @property
    def state(self):
        return self.record["state"]

    def __repr__(self):
        return f"Handle({self.id!r})"


class CoordinationStore:
    """In-process linearizable store.

    ``snapshot_path`` enables persistence. With ``snapshot_every=None`` every
    mutation is appended to the journal before the call returns; a number
    means the owner calls :meth:`maybe_snapshot` and a snapshot is taken at
    most that often (in seconds).
    """

    def __init__(self, name="local", snapshot_path=None, snapshot_every=None, keep_history=False):
        if not name or "/" in name:
            raise ValidationError(f"invalid store name {name!r}")
        self.name = name
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._kv = {}
        self._queues = {GLOBAL: deque()}
        self._where = {}
        self._claims = {}
        self._counters = {}
        self._seq = 0
        self.history = [] if keep_history else None
        self.snapshot_path = os.fspath(snapshot_path) if snapshot_path else None
        self.snapshot_every = snapshot_every
        self._journal = None
        self._journal_records = 0
        self._last_snapshot = time.monotonic()
        self._listeners = []
        if self.snapshot_path:
            if snapshot_every is None:
                self._open_journal(truncate=True)
            self.snapshot()

    # -- persistence ---------------------------------------------------------

    @property
    def journal_path(self):
        return self.snapshot_path + ".journal"

    def _open_journal(self, truncate):
        if truncate:
            with open(self.journal_path, "wb") as fh:
                fh.write(JOURNAL_MAGIC)
        self._journal = open(self.journal_path, "ab")

    def _log(self, record):
        self._seq += 1
        if self._journal is None:
            return
        record["seq"] = self._seq
        self._journal.write(_frame(record))
        self._journal.flush()
        self._journal_records += 1
        if self._journal_records >= COMPACT_EVERY:
            self.snapshot()

    def snapshot_bytes(self):
        """Canonical serialization of the whole store."""
        with self._lock:
            records = [{"type": "meta", "name": self.name, "seq": self._seq,
                        "counters": dict(sorted(self._counters.items()))}]
            for key in sorted(self._kv):
                version, value = self._kv[key]
                records.append({"type": "kv", "key": key, "version": version, "value": value})
            for qname in sorted(self._queues):
                records.append({"type": "queue", "name": qname, "items": list(self._queues[qname])})
            for cu_id in sorted(self._claims):
                records.append({"type": "claim", "cu": cu_id, "pilot": self._claims[cu_id]})
            records.append({"type": "end", "count": len(records)})
            return SNAPSHOT_MAGIC + b"".join(_frame(r) for r in records)

    def snapshot(self, path=None):
        """Write a full snapshot and reset the journal. Returns the path."""
        with self._lock:
            path = os.fspath(path) if path else self.snapshot_path
            if not path:
                raise ValueError("no snapshot path configured")
            data = self.snapshot_bytes()
            tmp = f"{path}.tmp"
            with open(tmp, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
            if path == self.snapshot_path and self._journal is not None:
                self._journal.close()
                self._open_journal(truncate=True)
                self._journal_records = 0
            self._last_snapshot = time.monotonic()
            return path

    def maybe_snapshot(self):
        """Periodic-mode hook: snapshot if ``snapshot_every`` has elapsed."""
        if self.snapshot_path and self.snapshot_every is not None:
            if time.monotonic() - self._last_snapshot >= self.snapshot_every:
                self.snapshot()

    def close(self):
        with self._lock:
            if self._journal is not None:
                self._journal.close()
                self._journal = None

    @classmethod
    def restore(cls, path, snapshot_every=None, keep_history=False, resume=True):
        """Rebuild a store from ``path`` plus any journal beside it.

        With ``resume`` the returned store keeps persisting to ``path``.
        """
        path = os.fspath(path)
        with open(path, "rb") as fh:
            data = fh.read()
        store = cls.__new__(cls)
        cls.__init__(store, keep_history=keep_history)
        count = 0
        ended = False
        for offset, rec in _read_records(data, SNAPSHOT_MAGIC, "snapshot"):
            if ended:
                raise IntegrityError("snapshot: data after end record", offset=offset)
            kind = rec.get("type")
            if kind == "meta":
                store.name = rec["name"]
                store._seq = rec["seq"]
                store._counters = dict(rec["counters"])
            elif kind == "kv":
                store._kv[rec["key"]] = [rec["version"], rec["value"]]
            elif kind == "queue":
                store._queues[rec["name"]] = deque(rec["items"])
                for item in rec["items"]:
                    store._where[item] = rec["name"]
            elif kind == "claim":
                store._claims[rec["cu"]] = rec["pilot"]
            elif kind == "end":
                if rec["count"] != count:
                    raise IntegrityError("snapshot: record count mismatch", offset=offset)
                ended = True
                continue
            else:
                raise IntegrityError(f"snapshot: unknown record type {kind!r}", offset=offset)
            count += 1
        if not ended:
            raise IntegrityError("snapshot: truncated (no end record)", offset=len(data))
        journal = path + ".journal"
        if os.path.exists(journal):
            with open(journal, "rb") as fh:
                jdata = fh.read()
            for _, rec in _read_records(jdata, JOURNAL_MAGIC, "journal"):
                if rec["seq"] <= store._seq:
                    continue
                store._apply(rec)
                store._seq = rec["seq"]
        if resume:
            store.snapshot_path = path
            store.snapshot_every = snapshot_every
            if snapshot_every is None:
                store._open_journal(truncate=False)
        return store

    def _apply(self, rec):
        op = rec["op"]
        if op == "put":
            self._kv[rec["key"]] = [rec["version"], rec["value"]]
        elif op == "delete":
            self._kv.pop(rec["key"], None)
        elif op == "counter":
            self._counters[rec["kind"]] = rec["value"]
        elif op == "queue":
            self._queues.setdefault(rec["name"], deque())
        elif op == "enqueue":
            self._queues[rec["queue"]].append(rec["cu"])
            self._where[rec["cu"]] = rec["queue"]
        elif op == "pull":
            q = self._queues[rec["queue"]]
            if not q or q[0] != rec["cu"]:
                raise IntegrityError(f"journal replay: pull of {rec['cu']} does not match queue head")
            q.popleft()
            del self._where[rec["cu"]]
            self._claims[rec["cu"]] = rec["pilot"]
        elif op == "remove":
            self._queues[rec["queue"]].remove(rec["cu"])
            del self._where[rec["cu"]]
        elif op == "release":
            self._claims.pop(rec["cu"], None)
        elif op == "drop_queue":
            for item in self._queues.pop(rec["name"], ()):
                self._where.pop(item, None)
        else:
            raise IntegrityError(f"journal replay: unknown op {op!r}")

    # -- kv --------------------------------------------------------------------

    def put_state(self, key, value):
        """Store ``value`` under ``key``; returns the new version."""
        if not isinstance(key, str) or not key:
            raise ValidationError("key must be a non-empty string")
        with self._lock:
            version = self._kv.get(key, [0])[0] + 1
            value = copy.deepcopy(value)
            self._kv[key] = [version, value]
            self._log({"op": "put", "key": key, "version": version, "value": value})
            return version

    def get_state(self, key, default=_MISSING):
        with self._lock:
            entry = self._kv.get(key)
            if entry is None:
                if default is _MISSING:
                    raise NotFoundError(f"no such key {key!r}")
                return default
            return copy.deepcopy(entry[1])

    def get_versioned(self, key):
        with self._lock:
            if key not in self._kv:
                raise NotFoundError(f"no such key {key!r}")
            version, value = self._kv[key]
            return version, copy.deepcopy(value)

    def update(self, key, fn, default=_MISSING):
        """Atomically replace the value under ``key`` with ``fn(value)``."""
        with self._lock:
            current = self.get_state(key, default)
            new = fn(current)
            self.put_state(key, new)
            return copy.deepcopy(new)

    def delete(self, key):
        with self._lock:
            if key not in self._kv:
                raise NotFoundError(f"no such key {key!r}")
            del self._kv[key]
            self._log({"op": "delete", "key": key})

    def keys(self, prefix=""):
        with self._lock:
            return sorted(k for k in self._kv if k.startswith(prefix))

    def incr(self, key, amount=1):
        with self._lock:
            value = self.get_state(key, 0) + amount
            self.put_state(key, value)
            return value

    def next_id(self, kind):
        """Allocate the next ``ps://<store>/<kind>/<n>`` address."""
        with self._lock:
            n = self._counters.get(kind, 0) + 1
            self._counters[kind] = n
            self._log({"op": "counter", "kind": kind, "value": n})
            return f"ps://{self.name}/{kind}/{n}"

    def store_name(self):
        return self.name

    def reconnect(self, unit_id):
        key = key_for(unit_id)
        with self._lock:
            if key not in self._kv:
                raise NotFoundError(f"unknown unit or pilot {unit_id!r}")
        return Handle(self, unit_id)

    # -- queues ----------------------------------------------------------------

    def register_queue(self, name):
        with self._lock:
            if name not in self._queues:
                self._queues[name] = deque()
                self._log({"op": "queue", "name": name})

    def register_pilot(self, pilot_id):
        self.register_queue(pilot_id)

    def has_queue(self, name):
        with self._lock:
            return name in self._queues

    def drop_queue(self, name):
        """Delete a pilot queue; returns the ids it still held, in order."""
        if name == GLOBAL:
            raise ValidationError("the global queue cannot be dropped")
        with self._lock:
            items = list(self._queues.get(name, ()))
            if name in self._queues:
                for item in items:
                    del self._where[item]
                del self._queues[name]
                self._log({"op": "drop_queue", "name": name})
            return items

    def enqueue(self, queue_name, cu_id):
        with self._cond:
            if queue_name not in self._queues:
                raise NotFoundError(f"no such queue {queue_name!r}")
            if cu_id in self._where:
                raise ConflictError(f"{cu_id} is already queued on {self._where[cu_id]!r}")
            if cu_id in self._claims:
                raise ConflictError(f"{cu_id} is already claimed by {self._claims[cu_id]!r}")
            self._queues[queue_name].append(cu_id)
            self._where[cu_id] = queue_name
            self._log({"op": "enqueue", "queue": queue_name, "cu": cu_id})
            self._cond.notify_all()
        for listener in list(self._listeners):
            listener(queue_name, cu_id)

    def subscribe(self, listener):
        """Call ``listener(queue_name, cu_id)`` after every enqueue."""
        self._listeners.append(listener)

    def _pop_locked(self, pilot_id):
        own = self._queues[pilot_id]
        if own:
            source = pilot_id
        elif self._queues[GLOBAL]:
            source = GLOBAL
        else:
            return None
        if self.history is not None:
            self.history.append((self._seq, pilot_id, source, len(own)))
        cu_id = self._queues[source].popleft()
        del self._where[cu_id]
        self._claims[cu_id] = pilot_id
        self._log({"op": "pull", "queue": source, "cu": cu_id, "pilot": pilot_id})
        return cu_id

    def pull(self, pilot_id, timeout=None):
        """Pop the head of ``pilot_id``'s queue, else of the global queue.

        The CU is claimed by the pilot until :meth:`release`. ``timeout``
        (seconds) makes the call block while both queues are empty.
        """
        with self._cond:
            if pilot_id not in self._queues or pilot_id == GLOBAL:
                raise NotFoundError(f"unknown pilot {pilot_id!r}")
            cu_id = self._pop_locked(pilot_id)
            if cu_id is not None or not timeout:
                return cu_id
            deadline = time.monotonic() + timeout
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._cond.wait(remaining)
                if pilot_id not in self._queues:
                    return None
                cu_id = self._pop_locked(pilot_id)
                if cu_id is not None:
                    return cu_id

    def remove(self, cu_id):
        """Take ``cu_id`` out of whichever queue holds it; False if none does."""
        with self._lock:
            queue_name = self._where.get(cu_id)
            if queue_name is None:
                return False
            self._queues[queue_name].remove(cu_id)
            del self._where[cu_id]
            self._log({"op": "remove", "queue": queue_name, "cu": cu_id})
            return True

    def release(self, cu_id):
        """Drop the claim a pilot holds on ``cu_id``."""
        with self._lock:
            if cu_id in self._claims:
                del self._claims[cu_id]
                self._log({"op": "release", "cu": cu_id})

    def queue_of(self, cu_id):
        with self._lock:
            return self._where.get(cu_id)

    def claimed_by(self, cu_id):
        with self._lock:
            return self._claims.get(cu_id)

    def queue_items(self, name):
        with self._lock:
            if name not in self._queues:
                raise NotFoundError(f"no such queue {name!r}")
            return list(self._queues[name])

    def queue_names(self):
        with self._lock:
            return sorted(self._queues)

    def claims(self):
        with self._lock:
            return dict(self._claims)

    def interrupt(self):
        """Wake every blocked puller (used on shutdown)."""
        with self._cond:
            self._cond.notify_all()


# -- socket front end ------------------------------------------------------------

REMOTE_OPS = frozenset({
    "put_state", "get_state", "get_versioned", "delete", "keys", "incr", "next_id",
    "register_queue", "register_pilot", "has_queue", "drop_queue", "enqueue", "pull",
    "remove", "release", "queue_of", "claimed_by", "queue_items", "queue_names", "claims",
    "snapshot", "store_name",
})

_ERRORS = {cls.__name__: cls for cls in (ConflictError, IntegrityError, NotFoundError, ValidationError)}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        store = self.server.store
        for line in self.rfile:
            try:
                req = json.loads(line)
                op = req["op"]
                if op not in REMOTE_OPS:
                    raise ValidationError(f"unsupported operation {op!r}")
                result = getattr(store, op)(*req.get("args", []), **req.get("kwargs", {}))
                if op == "snapshot":
                    result = str(result)
                reply = {"ok": True, "result": result}
            except PilotDataError as exc:
                reply = {"ok": False, "error": type(exc).__name__, "message": str(exc)}
            except Exception as exc:  # reported to the client, server keeps running
                reply = {"ok": False, "error": "PilotDataError", "message": f"{type(exc).__name__}: {exc}"}
            self.wfile.write(_dumps(reply) + b"\n")
            self.wfile.flush()
            if self.server.after_request is not None:
                self.server.after_request()


class StoreServer(socketserver.ThreadingMixIn, socketserver.UnixStreamServer):
    """Serve a :class:`CoordinationStore` over a Unix socket, one JSON request per line."""

    daemon_threads = True

    def __init__(self, store, socket_path, after_request=None):
        self.store = store
        self.after_request = after_request
        if os.path.exists(socket_path):
            os.unlink(socket_path)
        super().__init__(os.fspath(socket_path), _Handler)


class StoreClient:
    """Socket client exposing the same method names as the store."""

    def __init__(self, socket_path, timeout=30.0):
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.settimeout(timeout)
        self._sock.connect(os.fspath(socket_path))
        self._file = self._sock.makefile("rwb")
        self._lock = threading.Lock()
        self._ids = itertools.count()

    def call(self, op, *args, **kwargs):
        with self._lock:
            self._file.write(_dumps({"op": op, "args": list(args), "kwargs": kwargs}) + b"\n")
            self._file.flush()
            line = self._file.readline()
        if not line:
            raise PilotDataError("store server closed the connection")
        reply = json.loads(line)
        if reply["ok"]:
            return reply["result"]
        raise _ERRORS.get(reply["error"], PilotDataError)(reply["message"])

    def __getattr__(self, op):
        if op not in REMOTE_OPS:
            raise AttributeError(op)
        return lambda *args, **kwargs: self.call(op, *args, **kwargs)

    def reconnect(self, unit_id):
        self.get_state(key_for(unit_id))
        return Handle(self, unit_id)

    def close(self):
        self._file.close()
        self._sock.close()
