"""Pilot descriptions, pilot objects, the bandwidth model and the adaptor interface."""

import enum
import math
import shlex
from dataclasses import dataclass, field, fields

from ..errors import AdaptorError, ModelError, ValidationError
from ..topology import AffinityLabel
from ..units import digest_bytes


class PCState(str, enum.Enum):
    NEW = "NEW"
    QUEUED_AT_RESOURCE = "QUEUED_AT_RESOURCE"
    ACTIVE = "ACTIVE"
    DONE = "DONE"
    FAILED = "FAILED"
    CANCELED = "CANCELED"

    def __str__(self):
        return self.value


class PDState(str, enum.Enum):
    NEW = "NEW"
    ACTIVE = "ACTIVE"
    DELETED = "DELETED"

    def __str__(self):
        return self.value


class StagingMode(str, enum.Enum):
    PULL = "PULL"
    PUSH = "PUSH"

    def __str__(self):
        return self.value


def split_service_url(url):
    """Return ``(scheme, address)`` of a ``scheme://address`` URL."""
    if not isinstance(url, str) or "://" not in url:
        raise ValidationError(f"service_url must look like scheme://address, got {url!r}")
    scheme, address = url.split("://", 1)
    if not scheme:
        raise ValidationError(f"service_url {url!r} has no scheme")
    return scheme, address


@dataclass(frozen=True)
class QueueModel:
    """Time a pilot waits in the resource's batch queue.

    ``kind`` is ``"fixed"`` (``value`` seconds) or ``"exponential"``
    (``value`` is the mean).
    """

    kind: str = "fixed"
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("fixed", "exponential"):
            raise ValidationError(f"unknown queue model {self.kind!r}")
        if not self.value >= 0:
            raise ValidationError(f"queue model value must be ≥ 0, got {self.value!r}")

    @classmethod
    def parse(cls, given):
        if given is None:
            return cls()
        if isinstance(given, QueueModel):
            return given
        if isinstance(given, (int, float)):
            return cls("fixed", float(given))
        if isinstance(given, dict) and len(given) == 1:
            ((kind, value),) = given.items()
            return cls(kind, float(value))
        raise ValidationError(f"cannot parse queue model {given!r}")

    def sample(self, rng):
        if self.kind == "fixed" or self.value == 0:
            return self.value
        return rng.expovariate(1.0 / self.value)

    @property
    def expected(self):
        return self.value

    def to_json(self):
        return {self.kind: self.value}


class _Desc:
    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ValidationError([f"unknown field {k!r}" for k in unknown])
        return cls(**data)

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        for key, value in out.items():
            if isinstance(value, (QueueModel,)):
                out[key] = value.to_json()
            elif isinstance(value, enum.Enum):
                out[key] = value.value
        return out


@dataclass
class PilotComputeDescription(_Desc):
    """``slowdown`` inflates each CU's runtime by that fraction per other
    CU already running on the pilot (simulated backend only)."""

    service_url: str = "sim://localhost"
    process_count: int = 1
    affinity: str = None
    walltime: float = None
    queue_model: object = None
    staging_mode: str = "PULL"
    slowdown: float = 0.0
    name: str = None

    def validate(self):
        problems = []
        try:
            split_service_url(self.service_url)
        except ValidationError as exc:
            problems.extend(exc.violations)
        if isinstance(self.process_count, bool) or not isinstance(self.process_count, int) or self.process_count < 1:
            problems.append(f"process_count ≥ 1 required, got {self.process_count!r}")
        if self.walltime is not None and not self.walltime > 0:
            problems.append("walltime must be positive")
        if not self.slowdown >= 0:
            problems.append("slowdown must be ≥ 0")
        try:
            QueueModel.parse(self.queue_model)
        except ValidationError as exc:
            problems.extend(exc.violations)
        try:
            StagingMode(str(self.staging_mode).upper())
        except ValueError:
            problems.append(f"staging_mode must be PUSH or PULL, got {self.staging_mode!r}")
        if self.affinity is not None:
            try:
                AffinityLabel.parse(self.affinity)
            except ValidationError as exc:
                problems.extend(exc.violations)
        return problems


@dataclass
class PilotDataDescription(_Desc):
    service_url: str = "sim://localhost"
    affinity: str = None
    capacity: float = None
    name: str = None

    def validate(self):
        problems = []
        try:
            split_service_url(self.service_url)
        except ValidationError as exc:
            problems.extend(exc.violations)
        if self.capacity is not None and not self.capacity >= 0:
            problems.append("capacity must be ≥ 0")
        if self.affinity is not None:
            try:
                AffinityLabel.parse(self.affinity)
            except ValidationError as exc:
                problems.extend(exc.violations)
        return problems


@dataclass(eq=False)
class PilotCompute:
    id: str
    description: PilotComputeDescription
    label: AffinityLabel
    adaptor: object = field(repr=False, default=None)
    state: PCState = PCState.NEW
    free_slots: int = 0
    sandbox_root: str = None
    submit_time: float = 0.0
    activation_time: float = None
    staging_mode: StagingMode = StagingMode.PULL

    @property
    def process_count(self):
        return self.description.process_count

    @property
    def busy_slots(self):
        return self.process_count - self.free_slots

    def to_record(self):
        return {
            "id": self.id,
            "kind": "pilot-compute",
            "description": self.description.to_dict(),
            "label": str(self.label),
            "state": self.state.value,
            "sandbox_root": self.sandbox_root,
            "activation_time": self.activation_time,
        }


@dataclass(eq=False)
class PilotData:
    id: str
    description: PilotDataDescription
    label: AffinityLabel
    adaptor: object = field(repr=False, default=None)
    state: PDState = PDState.NEW
    held_dus: set = field(default_factory=set)
    bytes_used: float = 0
    root: str = None

    @property
    def capacity(self):
        return self.description.capacity

    def to_record(self):
        return {
            "id": self.id,
            "kind": "pilot-data",
            "description": self.description.to_dict(),
            "label": str(self.label),
            "state": self.state.value,
            "held_dus": sorted(self.held_dus),
            "bytes_used": self.bytes_used,
        }


class BandwidthMatrix:
    """Link rates in bytes (or abstract units) per second between labels.

    Lookups try the exact pair, then the reversed pair, then ``default``.
    Two resources at the same label exchange data through a filesystem link
    and cost nothing.
    """

    def __init__(self, links=(), default=None):
        self._rates = {}
        if default is not None and not default > 0:
            raise ValidationError(f"default bandwidth must be positive, got {default!r}")
        self.default = default
        for entry in links:
            a, b, rate = entry
            self.set(a, b, rate, symmetric=False)

    def set(self, a, b, rate, symmetric=False):
        if not rate > 0:
            raise ValidationError(f"bandwidth {a}->{b} must be positive, got {rate!r}")
        self._rates[(str(a), str(b))] = rate
        if symmetric:
            self._rates[(str(b), str(a))] = rate

    def rate(self, a, b):
        a, b = str(a), str(b)
        if a == b:
            return math.inf
        if (a, b) in self._rates:
            return self._rates[(a, b)]
        if (b, a) in self._rates:
            return self._rates[(b, a)]
        if self.default is None:
            raise ModelError(f"no bandwidth between {a!r} and {b!r} and no default rate")
        return self.default

    def transfer_seconds(self, size, a, b):
        """Seconds to move ``size`` bytes from ``a`` to ``b``."""
        if str(a) == str(b) or size == 0:
            return 0.0
        return size / self.rate(a, b)

    def links(self):
        return [[a, b, r] for (a, b), r in sorted(self._rates.items())]

    @classmethod
    def from_config(cls, config):
        if config is None:
            return cls(default=None)
        if isinstance(config, BandwidthMatrix):
            return config
        if isinstance(config, dict):
            return cls(config.get("links", ()), config.get("default"))
        return cls(config)

    def to_config(self):
        return {"default": self.default, "links": self.links()}


@dataclass
class TransferRecord:
    target: str
    source: str = None
    seconds: float = 0.0
    ok: bool = True
    skipped: bool = False
    error: str = None


@dataclass
class ReplicationReport:
    du_id: str
    mode: str
    transfers: list = field(default_factory=list)
    total_seconds: float = 0.0

    @property
    def succeeded(self):
        return [t.target for t in self.transfers if t.ok]

    @property
    def failed(self):
        return [t.target for t in self.transfers if not t.ok]


# -- synthetic tasks -------------------------------------------------------------

SYNTHETIC_PREFIX = "synthetic:"


def synthetic_seconds(executable):
    """Duration of a ``synthetic:<seconds>`` task, ``None`` for real programs."""
    if not executable.startswith(SYNTHETIC_PREFIX):
        return None
    try:
        seconds = float(executable[len(SYNTHETIC_PREFIX):])
    except ValueError:
        raise ValidationError(f"bad synthetic task tag {executable!r}") from None
    if not seconds >= 0:
        raise ValidationError(f"synthetic duration must be ≥ 0 in {executable!r}")
    return seconds


def synthetic_plan(arguments):
    """Parse ``out=<relpath>`` and ``exit=<code>`` task arguments."""
    outputs, exit_code = [], 0
    for arg in arguments:
        if arg.startswith("out="):
            outputs.append(arg[4:])
        elif arg.startswith("exit="):
            exit_code = int(arg[5:])
    return outputs, exit_code


def synthetic_content(out_name, arguments, inputs):
    """Deterministic bytes a synthetic task writes to ``out_name``.

    ``inputs`` maps staged relative paths to their digests, so the output
    depends on exactly what the task read.
    """
    lines = [f"output {out_name}", "args " + shlex.join(arguments)]
    lines += [f"input {p} {d}" for p, d in sorted(inputs.items())]
    body = "\n".join(lines).encode()
    return (digest_bytes(body) + "\n").encode()


@dataclass
class ExecResult:
    exit_code: int
    seconds: float
    stderr: str = ""
    timed_out: bool = False
    canceled: bool = False


# -- adaptor registry -----------------------------------------------------------------

_ADAPTORS = {}


def register_adaptor(scheme, factory):
    """Make ``scheme://`` service URLs resolve to ``factory(session)``."""
    _ADAPTORS[scheme] = factory


def adaptor_factory(scheme):
    try:
        return _ADAPTORS[scheme]
    except KeyError:
        raise AdaptorError(f"no adaptor registered for scheme {scheme!r}") from None


def registered_schemes():
    return sorted(_ADAPTORS)


class Adaptor:
    """Backend interface for storage, sandboxes and execution.

    Every method that moves data returns the seconds the move took: a
    measured wall time for real backends, a modelled time for simulated ones.
    """

    scheme = None
    simulated = False

    def __init__(self, session):
        self.session = session

    def resolve_pilot_label(self, address, affinity):
        if affinity is not None:
            return AffinityLabel.parse(affinity)
        raise ValidationError(f"{self.scheme}:// pilots need an affinity label")

    def init_pilot_data(self, pd):
        raise NotImplementedError

    def init_sandbox(self, pilot):
        raise NotImplementedError

    def resolve_sources(self, refs):
        """Return ``[(relpath, size, digest, location_label_or_None, handle)]``."""
        raise NotImplementedError

    def ingest(self, pd, du, sources):
        raise NotImplementedError

    def copy_du(self, du, src_pd, dst_pd):
        raise NotImplementedError

    def replica_contents(self, pd, du):
        raise NotImplementedError

    def read_file(self, pd, du, relpath):
        raise NotImplementedError

    def export_du(self, pd, du, destination):
        raise NotImplementedError

    def delete_replica(self, pd, du):
        raise NotImplementedError

    def cu_dir(self, pilot, cu_id):
        raise NotImplementedError

    def prepare_sandbox(self, pilot, cu_id):
        raise NotImplementedError

    def stage_du(self, du, src_pd, pilot, cu_id, link):
        raise NotImplementedError

    def discard_sandbox(self, pilot, cu_id):
        pass

    def sandbox_contents(self, pilot, cu_id):
        raise NotImplementedError

    def execute(self, pilot, cu, timeout=None, cancel=None):
        raise NotImplementedError

    def collect_outputs(self, pilot, cu_id, exclude, pattern="*"):
        raise NotImplementedError

    def store_outputs(self, pilot, cu_id, relpaths, du, pd):
        raise NotImplementedError
