"""Pilot-Computes, Pilot-Data, backend adaptors and the services that create them."""

from . import local, sim  # noqa: F401  (register the built-in adaptors)
from .base import (
    Adaptor,
    BandwidthMatrix,
    ExecResult,
    PCState,
    PDState,
    PilotCompute,
    PilotComputeDescription,
    PilotData,
    PilotDataDescription,
    QueueModel,
    ReplicationReport,
    StagingMode,
    TransferRecord,
    adaptor_factory,
    register_adaptor,
    registered_schemes,
)
from .services import PilotComputeService, PilotDataService, ReplicationMode
from .sim import sim_ref

__all__ = [
    "Adaptor", "BandwidthMatrix", "ExecResult", "PCState", "PDState", "PilotCompute",
    "PilotComputeDescription", "PilotComputeService", "PilotData", "PilotDataDescription",
    "PilotDataService", "QueueModel", "ReplicationMode", "ReplicationReport", "StagingMode",
    "TransferRecord", "adaptor_factory", "register_adaptor", "registered_schemes", "sim_ref",
]
