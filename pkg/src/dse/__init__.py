"""Distributed speculative execution: runtime, coordinator, simulator."""

from .core import ClusterEvent, EventKind, GraphFragment, Header, RollbackPlan, Vertex, merge_deps
from .coordinator import Coordinator, DependencyGraph, RecoverableBoundary, compute_boundary, compute_rollback
from .runtime import Runtime, RuntimeConfig, SThread, StateObjectBackend

__all__ = [
    "ClusterEvent",
    "Coordinator",
    "DependencyGraph",
    "EventKind",
    "GraphFragment",
    "Header",
    "RecoverableBoundary",
    "RollbackPlan",
    "Runtime",
    "RuntimeConfig",
    "SThread",
    "StateObjectBackend",
    "Vertex",
    "compute_boundary",
    "compute_rollback",
    "merge_deps",
]
