"""Run reports: one self-describing JSON record per run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field


@dataclass
class RunReport:
    workload: dict
    topology: str
    clock: str
    resolve_policy: str
    final_checksum: int
    reference_checksum: int
    completed: bool
    launch_time_s: float
    launch_connect_span: float
    launch_attempts: int
    launch_peak_concurrent: int
    root_sessions: int
    run_time_s: float
    checkpoints: int
    aborted_checkpoints: int
    restarts: int
    ckpt_time_s: float
    write_time_s: float
    restart_time_s: float
    time_to_first_resume_s: float
    image_bytes_per_rank: list[int]
    total_image_bytes: int
    write_bandwidth_bps: float
    drain_windows: list[int]
    drained_messages: int
    rc_sends: int
    ud_sends: int
    ud_queries: int
    control_messages: list[int]
    control_messages_launch: list[int]
    control_messages_protocol: list[int]
    misdeliveries: int
    duplicates: int
    fabric: dict
    lazy_materialized_bytes: int = 0
    lazy_region_bytes: int = 0
    invariants: dict = field(default_factory=dict)

    @property
    def checksum_ok(self) -> bool:
        return self.final_checksum == self.reference_checksum

    @property
    def ok(self) -> bool:
        return all(self.invariants.values())

    @property
    def steady_control_messages(self) -> int:
        return sum(self.control_messages)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["checksum_ok"] = self.checksum_ok
        d["ok"] = self.ok
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def summary(self) -> str:
        w = self.workload
        lines = [
            f"workload   {w['kind']} ranks={w['ranks']} nodes={w['nodes']} "
            f"iters={w['iterations']} seed={w['seed']} ({self.topology}, {self.clock})",
            f"checksum   {self.final_checksum:016x} "
            f"({'matches' if self.checksum_ok else 'DIFFERS FROM'} reference)",
            f"launch     {self.launch_time_s * 1e3:.1f} ms, root sessions {self.root_sessions}",
            f"ckpt       {self.checkpoints} committed, {self.aborted_checkpoints} aborted, "
            f"{self.ckpt_time_s * 1e3:.1f} ms, {self.total_image_bytes} image bytes",
            f"restart    {self.restarts} restarts, {self.restart_time_s * 1e3:.1f} ms",
            f"traffic    rc={self.rc_sends} ud={self.ud_sends} ud_queries={self.ud_queries} "
            f"steady_control={self.steady_control_messages}",
        ]
        bad = [k for k, v in self.invariants.items() if not v]
        lines.append("invariants " + ("all held" if not bad else "FAILED: " + ", ".join(bad)))
        return "\n".join(lines)
