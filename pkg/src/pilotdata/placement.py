"""Placement cost model: staging, replication and data-availability times, the
compute-first versus data-first rule, and incremental replication plans.

Everything here is a pure function of its inputs.

Cost terms (seconds):

* ``T_X`` moving the input bytes to where the compute runs;
* ``T_register`` registering the files (constant per file);
* ``T_S = T_X + T_register`` staging;
* ``T_R`` creating ``R`` replicas (sum of transfers when sequential, longest
  transfer when grouped);
* ``T_D = T_R + T_S`` until the data is usable (``T_S`` alone when R = 0).
"""

import enum
import math
from dataclasses import dataclass, field

from .errors import ValidationError
from .pilots.base import BandwidthMatrix, QueueModel
from .topology import AffinityLabel


class PlacementMode(str, enum.Enum):
    COMPUTE_FIRST = "COMPUTE_FIRST"
    DATA_FIRST = "DATA_FIRST"

    def __str__(self):
        return self.value


def _nonneg(name, value):
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value >= 0):
        raise ValidationError(f"{name} must be a finite number ≥ 0, got {value!r}")


@dataclass(frozen=True)
class CostEstimate:
    T_Q_pilot: float = 0.0
    T_Q_task: float = 0.0
    T_C: float = 0.0
    T_X: float = 0.0
    T_register: float = 0.0
    T_R: float = 0.0
    R: int = 0

    def __post_init__(self):
        for name in ("T_Q_pilot", "T_Q_task", "T_C", "T_X", "T_register", "T_R"):
            _nonneg(name, getattr(self, name))
        if isinstance(self.R, bool) or not isinstance(self.R, int) or self.R < 0:
            raise ValidationError(f"R must be an integer ≥ 0, got {self.R!r}")
        if self.R == 0 and self.T_R != 0:
            raise ValidationError("T_R must be 0 when no replicas are made")

    @property
    def T_S(self):
        return self.T_X + self.T_register

    @property
    def T_D(self):
        return self.T_R + self.T_S if self.R else self.T_S

    def to_row(self):
        return {"T_Q_pilot": self.T_Q_pilot, "T_Q_task": self.T_Q_task, "T_C": self.T_C,
                "T_X": self.T_X, "T_register": self.T_register, "T_S": self.T_S,
                "R": self.R, "T_R": self.T_R, "T_D": self.T_D}


@dataclass
class Workload:
    """Input files to move from ``source`` to ``destination``.

    ``replica_targets`` are labels that receive a full copy of the input
    before the compute starts; ``replication_mode`` is SEQUENTIAL or GROUP.
    """

    sizes: list
    source: str
    destination: str
    replica_targets: list = field(default_factory=list)
    replication_mode: str = "SEQUENTIAL"
    compute_seconds: float = 0.0
    task_queue_seconds: float = 0.0


def _replication_seconds(topology, bandwidths, total, source, targets, mode):
    pool = [source]
    times = []
    for target in targets:
        candidates = pool if mode == "SEQUENTIAL" else [source]
        nearest = min(candidates, key=lambda lbl: (topology.distance(lbl, target), str(lbl)))
        times.append(bandwidths.transfer_seconds(total, nearest, target))
        pool.append(target)
    if not times:
        return 0.0
    return sum(times) if mode == "SEQUENTIAL" else max(times)


def estimate(workload, topology, bandwidths, queue_models=None, t_register=0.0):
    """Cost terms for running ``workload`` at its destination.

    ``queue_models`` maps a label to the pilot queue model there; its
    expectation becomes ``T_Q_pilot``.
    """
    bandwidths = BandwidthMatrix.from_config(bandwidths)
    source = AffinityLabel.parse(workload.source)
    destination = AffinityLabel.parse(workload.destination)
    targets = [AffinityLabel.parse(t) for t in workload.replica_targets]
    for label in (source, destination, *targets):
        topology.distance(label, label)  # raises NotFoundError for unknown labels
    mode = str(workload.replication_mode).upper()
    if mode not in ("SEQUENTIAL", "GROUP"):
        raise ValidationError(f"unknown replication mode {workload.replication_mode!r}")
    for size in workload.sizes:
        _nonneg("file size", size)
    _nonneg("t_register", t_register)

    t_x = sum(bandwidths.transfer_seconds(size, source, destination) for size in workload.sizes)
    t_r = _replication_seconds(topology, bandwidths, sum(workload.sizes), source, targets, mode)
    queue = 0.0
    if queue_models and str(destination) in queue_models:
        queue = QueueModel.parse(queue_models[str(destination)]).expected
    return CostEstimate(
        T_Q_pilot=queue,
        T_Q_task=workload.task_queue_seconds,
        T_C=workload.compute_seconds,
        T_X=t_x,
        T_register=t_register * len(workload.sizes),
        T_R=t_r,
        R=len(targets),
    )


def decide(T_Q, T_X):
    """COMPUTE_FIRST when moving the data costs strictly more than waiting in
    the queue where it already is; DATA_FIRST otherwise (including a tie)."""
    _nonneg("T_Q", T_Q)
    _nonneg("T_X", T_X)
    return PlacementMode.COMPUTE_FIRST if T_X > T_Q else PlacementMode.DATA_FIRST


@dataclass(frozen=True)
class ReplicationStep:
    site: str
    distance: float
    capacity: int
    cumulative: int
    T_R: float


@dataclass
class ReplicationPlan:
    steps: list
    demand: int
    insufficient: bool

    @property
    def sites(self):
        return [s.site for s in self.steps]

    @property
    def R(self):
        return len(self.steps)

    @property
    def T_R(self):
        return sum(s.T_R for s in self.steps)


def plan_replication(sites, compute_capacity, demand, *, topology=None, seed=None,
                     bandwidths=None, size=0):
    """Grow a replica set one site at a time until it offers ``demand`` slots.

    Sites are visited in order of tree distance from ``seed`` (the current
    replica), ties broken by label; without a topology the given order is
    kept. Each step records the time to copy ``size`` bytes from the nearest
    replica already placed.
    """
    if not sites:
        raise ValidationError("plan_replication needs at least one site")
    sites = [str(AffinityLabel.parse(s)) for s in sites]
    if topology is not None and seed is not None:
        order = sorted(sites, key=lambda s: (topology.distance(seed, s), s))
        dist = {s: topology.distance(seed, s) for s in sites}
    else:
        order = list(sites)
        dist = {s: float(i) for i, s in enumerate(sites)}
    bw = BandwidthMatrix.from_config(bandwidths) if bandwidths is not None else None
    placed = [str(seed)] if seed is not None else []
    steps, cumulative = [], 0
    for site in order:
        if cumulative >= demand and steps:
            break
        cost = 0.0
        if bw is not None and placed and size:
            src = min(placed, key=lambda p: (topology.distance(p, site), p)) if topology else placed[0]
            cost = bw.transfer_seconds(size, src, site)
        cumulative += compute_capacity[site]
        steps.append(ReplicationStep(site, dist[site], compute_capacity[site], cumulative, cost))
        placed.append(site)
    return ReplicationPlan(steps, demand, insufficient=cumulative < demand)
