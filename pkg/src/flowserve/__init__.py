"""Workload-aware scheduling of LLM serving deployments, with a trace-replay simulator."""

from .core import (ClusterSpec, Deployment, FlowServeError, MachineSpec, ModelSpec, ReplicaConfig,
                   TraceRecord, TraceSpan, WorkloadType)
from .costmodel import CapacityTable, ProfileParams

__version__ = "0.1.0"

__all__ = [
    "ClusterSpec", "Deployment", "FlowServeError", "MachineSpec", "ModelSpec", "ReplicaConfig",
    "TraceRecord", "TraceSpan", "WorkloadType", "CapacityTable", "ProfileParams", "__version__",
]
