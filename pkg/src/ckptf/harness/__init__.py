"""Workloads, the run driver and run reports."""

from .driver import (
    Computation, RunConfig, inject_checkpoint_at, kill_all, launch, report, restart_all,
    run_workload,
)
from .rank import Pause, RankApp
from .report import RunReport
from .workloads import WorkloadKind, WorkloadSpec, reference_checksum

__all__ = [
    "Computation", "Pause", "RankApp", "RunConfig", "RunReport", "WorkloadKind",
    "WorkloadSpec", "inject_checkpoint_at", "kill_all", "launch", "reference_checksum",
    "report", "restart_all", "run_workload",
]
