"""Pilot-Data workload management: pilots for compute and storage, Data-Units,
Compute-Units, an affinity-aware scheduler and a placement cost model."""

from .agent import PilotAgent, Sandbox
from .coordination import GLOBAL, CoordinationStore, StoreClient, StoreServer
from .errors import (
    AdaptorError,
    CapacityError,
    ConflictError,
    ImmutabilityError,
    IntegrityError,
    ModelError,
    NotFoundError,
    PilotDataError,
    StagingError,
    StateError,
    StorageError,
    ValidationError,
)
from .pilots import (
    BandwidthMatrix,
    PCState,
    PDState,
    PilotComputeDescription,
    PilotComputeService,
    PilotDataDescription,
    PilotDataService,
    QueueModel,
    ReplicationMode,
    StagingMode,
    sim_ref,
)
from .scheduler import ComputeDataService, Policy, Reason, SchedulerConfig
from .session import Session
from .topology import AffinityLabel, TopologyTree
from .units import (
    ComputeUnitDescription,
    CUState,
    DataUnitDescription,
    DUState,
    validate_description,
)

__version__ = "0.1.0"

__all__ = [
    "PilotAgent",
    "Sandbox",
    "GLOBAL",
    "CoordinationStore",
    "StoreClient",
    "StoreServer",
    "AdaptorError",
    "CapacityError",
    "ConflictError",
    "ImmutabilityError",
    "IntegrityError",
    "ModelError",
    "NotFoundError",
    "PilotDataError",
    "StagingError",
    "StateError",
    "StorageError",
    "ValidationError",
    "BandwidthMatrix",
    "PCState",
    "PDState",
    "PilotComputeDescription",
    "PilotComputeService",
    "PilotDataDescription",
    "PilotDataService",
    "QueueModel",
    "ReplicationMode",
    "StagingMode",
    "sim_ref",
    "ComputeDataService",
    "Policy",
    "Reason",
    "SchedulerConfig",
    "Session",
    "AffinityLabel",
    "TopologyTree",
    "ComputeUnitDescription",
    "CUState",
    "DataUnitDescription",
    "DUState",
    "validate_description",
]
