"""Deterministic simulator of fork-based snapshotting for an in-memory key-value store."""
from .fork_engines import Engine, ErrorInjection, Phase, RollbackCase, SnapshotSession, begin_snapshot
from .sim_clock import Cause, CostModel, Scheduler
from .vm_core import World, coherence_audit, table_shape
from .workload import WorkloadSpec, generate

__version__ = "0.1.0"
__all__ = ["Cause", "CostModel", "Engine", "ErrorInjection", "Phase", "RollbackCase", "Scheduler",
           "SnapshotSession", "World", "WorkloadSpec", "begin_snapshot", "coherence_audit", "generate",
           "table_shape"]
