"""Compute-Units, Data-Units, their descriptions and state machines."""

import enum
import hashlib
import posixpath
from dataclasses import dataclass, field, fields
from urllib.parse import urlsplit

from .errors import ImmutabilityError, IntegrityError, StateError, ValidationError
from .topology import AffinityLabel

DIGEST = "sha256"


def digest_bytes(data):
    return hashlib.sha256(data).hexdigest()


def digest_file(path, chunk=1 << 20):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


class DUState(str, enum.Enum):
    NEW = "NEW"
    PENDING = "PENDING"
    AVAILABLE = "AVAILABLE"
    FAILED = "FAILED"
    DELETED = "DELETED"

    def __str__(self):
        return self.value


class CUState(str, enum.Enum):
    NEW = "NEW"
    QUEUED = "QUEUED"
    STAGING_IN = "STAGING_IN"
    RUNNING = "RUNNING"
    STAGING_OUT = "STAGING_OUT"
    DONE = "DONE"
    FAILED = "FAILED"
    CANCELED = "CANCELED"

    def __str__(self):
        return self.value

    @property
    def terminal(self):
        return self in TERMINAL


TERMINAL = frozenset({CUState.DONE, CUState.FAILED, CUState.CANCELED})
ACTIVE_STATES = frozenset({CUState.STAGING_IN, CUState.RUNNING, CUState.STAGING_OUT})

_FORWARD = {
    CUState.NEW: CUState.QUEUED,
    CUState.QUEUED: CUState.STAGING_IN,
    CUState.STAGING_IN: CUState.RUNNING,
    CUState.RUNNING: CUState.STAGING_OUT,
    CUState.STAGING_OUT: CUState.DONE,
}


def allowed_transition(current, target):
    current, target = CUState(current), CUState(target)
    if current in TERMINAL:
        return False
    if target in (CUState.FAILED, CUState.CANCELED):
        return True
    return _FORWARD.get(current) is target


def _basename(ref):
    parts = urlsplit(ref)
    path = parts.path or parts.netloc
    return posixpath.basename(path.rstrip("/"))


def _check_affinity(value, problems):
    if value is None:
        return
    try:
        AffinityLabel.parse(value)
    except ValidationError as exc:
        problems.extend(f"affinity: {v}" for v in exc.violations)


class _Description:
    """JSON round-tripping shared by both description types."""

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ValidationError([f"unknown field {k!r}" for k in unknown])
        return cls(**data)

    def to_dict(self):
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, (list, tuple)) else value
        return out


@dataclass
class DataUnitDescription(_Description):
    """References to the files that initially populate a Data-Unit.

    An empty ``file_refs`` list yields an output container that producers
    fill later.
    """

    file_refs: list = field(default_factory=list)
    affinity: str = None
    name: str = None


@dataclass
class ComputeUnitDescription(_Description):
    executable: str = ""
    arguments: list = field(default_factory=list)
    cores: int = 1
    input_data: list = field(default_factory=list)
    output_data: list = field(default_factory=list)
    affinity: str = None
    wall_time_estimate: float = None
    name: str = None


def validate_description(desc, known_dus=None):
    """Return every invariant violation of ``desc`` (empty list when valid).

    ``known_dus`` is a container of existing Data-Unit ids; when given,
    Compute-Unit input/output references are checked against it.
    """
    problems = []
    if isinstance(desc, DataUnitDescription):
        refs = desc.file_refs
        if not isinstance(refs, (list, tuple)):
            return ["file_refs must be a list"]
        seen = {}
        for ref in refs:
            if not isinstance(ref, str) or not ref:
                problems.append(f"file ref {ref!r} must be a non-empty string")
                continue
            base = _basename(ref)
            if not base:
                problems.append(f"file ref {ref!r} has no basename")
            elif base in seen:
                problems.append(f"duplicate basename {base!r} ({seen[base]!r}, {ref!r})")
            else:
                seen[base] = ref
        _check_affinity(desc.affinity, problems)
        return problems

    if isinstance(desc, ComputeUnitDescription):
        if not isinstance(desc.executable, str) or not desc.executable:
            problems.append("executable must be a non-empty string")
        if not isinstance(desc.arguments, (list, tuple)) or not all(isinstance(a, str) for a in desc.arguments):
            problems.append("arguments must be a list of strings")
        if isinstance(desc.cores, bool) or not isinstance(desc.cores, int) or desc.cores < 1:
            problems.append(f"cores ≥ 1 required, got {desc.cores!r}")
        for fname in ("input_data", "output_data"):
            refs = getattr(desc, fname)
            if not isinstance(refs, (list, tuple)):
                problems.append(f"{fname} must be a list of Data-Unit ids")
                continue
            if len(set(refs)) != len(refs):
                problems.append(f"{fname} lists a Data-Unit twice")
            if known_dus is not None:
                for du_id in refs:
                    if du_id not in known_dus:
                        problems.append(f"{fname} references unknown Data-Unit {du_id!r}")
        if desc.wall_time_estimate is not None and not desc.wall_time_estimate >= 0:
            problems.append("wall_time_estimate must be ≥ 0")
        _check_affinity(desc.affinity, problems)
        return problems

    return [f"unsupported description type {type(desc).__name__}"]


@dataclass(frozen=True)
class FileEntry:
    size: float
    digest: str

    def to_list(self):
        return [self.size, self.digest]


@dataclass
class DataUnit:
    """Immutable logical group of files, addressable by ``id``."""

    id: str
    description: DataUnitDescription = field(default_factory=DataUnitDescription)
    state: DUState = DUState.NEW
    manifest: dict = field(default_factory=dict)
    replicas: list = field(default_factory=list)
    home: str = None
    staging_seconds: float = 0.0

    @property
    def size(self):
        return sum(e.size for e in self.manifest.values())

    def add_file(self, relpath, entry):
        """Add one manifest entry while the unit is still open."""
        if self.state is DUState.AVAILABLE:
            raise ImmutabilityError(f"Data-Unit {self.id} is sealed; cannot add {relpath!r}")
        if relpath in self.manifest:
            raise IntegrityError(f"Data-Unit {self.id} already has a file at {relpath!r}")
        self.manifest[relpath] = entry

    def add_replica(self, pd_id):
        if pd_id not in self.replicas:
            self.replicas.append(pd_id)

    def to_record(self):
        return {
            "id": self.id,
            "description": self.description.to_dict(),
            "state": self.state.value,
            "manifest": {p: e.to_list() for p, e in sorted(self.manifest.items())},
            "replicas": list(self.replicas),
            "home": self.home,
            "staging_seconds": self.staging_seconds,
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            id=rec["id"],
            description=DataUnitDescription.from_dict(rec["description"]),
            state=DUState(rec["state"]),
            manifest={p: FileEntry(*e) for p, e in rec["manifest"].items()},
            replicas=list(rec["replicas"]),
            home=rec.get("home"),
            staging_seconds=rec.get("staging_seconds", 0.0),
        )


def seal(du, manifest=None, replica_contents=None):
    """Freeze ``du``: PENDING -> AVAILABLE.

    ``replica_contents`` maps replica id to that replica's actual
    ``{relpath: FileEntry}``; every manifest file must be present with a
    matching digest in at least one of them.
    """
    if du.state is DUState.AVAILABLE:
        raise ImmutabilityError(f"Data-Unit {du.id} is already sealed")
    if du.state is not DUState.PENDING:
        raise StateError("Data-Unit", du.state, DUState.AVAILABLE)
    manifest = dict(du.manifest if manifest is None else manifest)
    if replica_contents is not None:
        for relpath, entry in manifest.items():
            if not any(contents.get(relpath) == entry for contents in replica_contents.values()):
                raise IntegrityError(f"Data-Unit {du.id}: {relpath!r} missing from every replica")
    du.manifest = manifest
    du.state = DUState.AVAILABLE
    return du


@dataclass
class ComputeUnit:
    id: str
    description: ComputeUnitDescription
    state: CUState = CUState.NEW
    assigned_pilot: str = None
    timestamps: dict = field(default_factory=dict)
    staging_seconds: float = 0.0
    stage_out_seconds: float = 0.0
    run_seconds: float = 0.0
    exit_code: int = None
    reason: str = None

    @property
    def terminal(self):
        return self.state in TERMINAL

    def to_record(self):
        return {
            "id": self.id,
            "description": self.description.to_dict(),
            "state": self.state.value,
            "assigned_pilot": self.assigned_pilot,
            "timestamps": dict(self.timestamps),
            "staging_seconds": self.staging_seconds,
            "stage_out_seconds": self.stage_out_seconds,
            "run_seconds": self.run_seconds,
            "exit_code": self.exit_code,
            "reason": self.reason,
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            id=rec["id"],
            description=ComputeUnitDescription.from_dict(rec["description"]),
            state=CUState(rec["state"]),
            assigned_pilot=rec.get("assigned_pilot"),
            timestamps=dict(rec.get("timestamps", {})),
            staging_seconds=rec.get("staging_seconds", 0.0),
            stage_out_seconds=rec.get("stage_out_seconds", 0.0),
            run_seconds=rec.get("run_seconds", 0.0),
            exit_code=rec.get("exit_code"),
            reason=rec.get("reason"),
        )


def transition(cu, to, now=0.0, pilot=None):
    """Move ``cu`` along one allowed edge, recording the entry time."""
    to = CUState(to)
    if not allowed_transition(cu.state, to):
        raise StateError("Compute-Unit", cu.state, to)
    if pilot is not None:
        if cu.assigned_pilot not in (None, pilot):
            raise StateError("Compute-Unit pilot", cu.assigned_pilot, pilot)
        cu.assigned_pilot = pilot
    if to is CUState.STAGING_IN and cu.assigned_pilot is None:
        raise StateError("Compute-Unit (no pilot assigned)", cu.state, to)
    cu.state = to
    cu.timestamps[to.value] = now
    return cu
