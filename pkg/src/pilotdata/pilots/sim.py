"""Deterministic simulated backend (``sim://<affinity-label>``).

Files are held in memory. Transfer times follow the session's bandwidth
matrix; moving data between two resources at the same label is free.
Source files are referenced as ``sim:<name>?size=<n>&at=<label>``.
"""

import fnmatch
import os
from dataclasses import dataclass
from urllib.parse import parse_qs, urlsplit

from ..coordination import short_id
from ..errors import ModelError, NotFoundError, StagingError, ValidationError
from ..topology import AffinityLabel
from ..units import FileEntry, digest_bytes
from .base import Adaptor, ExecResult, register_adaptor, synthetic_content, synthetic_plan, synthetic_seconds


@dataclass(frozen=True)
class SimFile:
    size: float
    data: bytes

    @property
    def digest(self):
        return digest_bytes(self.data)

    def entry(self):
        return FileEntry(self.size, self.digest)


def sim_ref(name, size, at=None):
    """Build a simulated source reference."""
    ref = f"sim:{name}?size={size!r}"
    return ref + (f"&at={at}" if at is not None else "")


def parse_sim_ref(ref):
    parts = urlsplit(ref)
    if parts.scheme != "sim" or not parts.path:
        raise StagingError(f"not a simulated file reference: {ref!r}")
    query = parse_qs(parts.query)
    try:
        size = float(query["size"][0])
    except (KeyError, ValueError):
        raise StagingError(f"simulated file reference {ref!r} needs a numeric size") from None
    if size.is_integer():
        size = int(size)
    at = query.get("at", [None])[0]
    return parts.path.rsplit("/", 1)[-1], size, at


class SimAdaptor(Adaptor):
    scheme = "sim"
    simulated = True

    def __init__(self, session):
        super().__init__(session)
        self.stores = {}
        self.sandboxes = {}
        self.failing_targets = set()

    def _check_label(self, label):
        if label not in self.session.topology:
            raise NotFoundError(f"affinity label {str(label)!r} is not in the topology")
        return label

    def resolve_pilot_label(self, address, affinity):
        label = AffinityLabel.parse(affinity if affinity is not None else address)
        if affinity is not None and address and address != str(label):
            raise ValidationError(f"sim://{address} conflicts with affinity {affinity!r}")
        return self._check_label(label)

    def init_pilot_data(self, pd):
        self._check_label(pd.label)
        self.stores[pd.id] = {}
        pd.root = f"sim://{pd.label}"

    def init_sandbox(self, pilot):
        self._check_label(pilot.label)
        pilot.sandbox_root = f"sim://{pilot.label}/{short_id(pilot.id)}"
        self.sandboxes[(pilot.id, "_pilot")] = {}

    def _seconds(self, size, src, dst):
        if src is None:
            if size == 0:
                return 0.0
            default = self.session.bandwidths.default
            if default is None:
                raise ModelError("source without location needs a default bandwidth")
            return size / default
        return self.session.bandwidths.transfer_seconds(size, src, dst)

    def resolve_sources(self, refs):
        out = []
        for ref in refs:
            name, size, at = parse_sim_ref(ref)
            if at is not None:
                self._check_label(AffinityLabel.parse(at))
            data = f"sim-source {name} {size!r} {at}".encode()
            out.append((name, size, digest_bytes(data), at, SimFile(size, data)))
        return out

    def ingest(self, pd, du, sources):
        files = self.stores[pd.id].setdefault(du.id, {})
        seconds = 0.0
        for relpath, size, digest, at, simfile in sources:
            seconds += self._seconds(size, at, pd.label)
            files[relpath] = simfile
        return seconds

    def copy_du(self, du, src_pd, dst_pd):
        if dst_pd.id in self.failing_targets:
            raise StagingError(f"transfer of {du.id} to {dst_pd.id} failed (injected)")
        src_files = self.stores[src_pd.id].get(du.id)
        if src_files is None:
            raise StagingError(f"{src_pd.id} holds no copy of {du.id}")
        self.stores[dst_pd.id][du.id] = dict(src_files)
        return self._seconds(sum(f.size for f in src_files.values()), src_pd.label, dst_pd.label)

    def replica_contents(self, pd, du):
        files = self.stores.get(pd.id, {}).get(du.id, {})
        return {p: f.entry() for p, f in files.items()}

    def read_file(self, pd, du, relpath):
        try:
            return self.stores[pd.id][du.id][relpath].data
        except KeyError:
            raise NotFoundError(f"{du.id} has no file {relpath!r} on {pd.id}") from None

    def export_du(self, pd, du, destination):
        os.makedirs(destination, exist_ok=True)
        for relpath, simfile in self.stores[pd.id][du.id].items():
            target = os.path.join(destination, relpath)
            os.makedirs(os.path.dirname(target), exist_ok=True)
            with open(target, "wb") as fh:
                fh.write(simfile.data)
        return destination

    def delete_replica(self, pd, du):
        self.stores[pd.id].pop(du.id, None)

    def cu_dir(self, pilot, cu_id):
        return f"{pilot.sandbox_root}/{short_id(cu_id)}"

    def _sandbox(self, pilot, cu_id):
        return self.sandboxes.setdefault((pilot.id, cu_id), {})

    def prepare_sandbox(self, pilot, cu_id):
        self._sandbox(pilot, cu_id)

    def stage_du(self, du, src_pd, pilot, cu_id, link):
        box = self._sandbox(pilot, cu_id)
        files = self.stores[src_pd.id].get(du.id)
        if files is None:
            raise StagingError(f"{src_pd.id} holds no copy of {du.id}")
        for relpath, simfile in files.items():
            if relpath in box:
                raise StagingError(f"input path collision at {relpath!r} staging {du.id}")
            box[relpath] = simfile
        if link:
            return 0.0
        return self._seconds(sum(f.size for f in files.values()), src_pd.label, pilot.label)

    def sandbox_contents(self, pilot, cu_id):
        return {p: f.entry() for p, f in self._sandbox(pilot, cu_id).items()}

    def execute(self, pilot, cu, timeout=None, cancel=None):
        desc = cu.description
        seconds = synthetic_seconds(desc.executable)
        if seconds is None:
            return ExecResult(127, 0.0, f"simulated backend runs synthetic tasks only, not {desc.executable!r}")
        outputs, exit_code = synthetic_plan(desc.arguments)
        box = self._sandbox(pilot, cu.id)
        inputs = {p: f.digest for p, f in box.items()}
        for name in outputs:
            data = synthetic_content(name, desc.arguments, inputs)
            box[name] = SimFile(len(data), data)
        box["stdout"] = SimFile(0, b"")
        stderr = f"synthetic task exited with {exit_code}" if exit_code else ""
        box["stderr"] = SimFile(len(stderr), stderr.encode())
        return ExecResult(exit_code, seconds, stderr)

    def collect_outputs(self, pilot, cu_id, exclude, pattern="*"):
        box = self._sandbox(pilot, cu_id)
        return {p: f.entry() for p, f in sorted(box.items())
                if p not in exclude and fnmatch.fnmatch(p, pattern)}

    def store_outputs(self, pilot, cu_id, relpaths, du, pd):
        box = self._sandbox(pilot, cu_id)
        target = self.stores[pd.id].setdefault(du.id, {})
        size = 0
        for relpath in relpaths:
            if relpath not in box:
                raise StagingError(f"declared output {relpath!r} missing from sandbox of {cu_id}")
            target[relpath] = box[relpath]
            size += box[relpath].size
        return self._seconds(size, pilot.label, pd.label)

    def discard_sandbox(self, pilot, cu_id):
        self.sandboxes.pop((pilot.id, cu_id), None)


register_adaptor("sim", SimAdaptor)
