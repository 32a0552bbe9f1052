"""Checkpoint a running stencil, kill every rank, restart on a reshuffled fabric."""

import tempfile

from ckptf.harness import Pause, RunConfig, WorkloadSpec, launch

spec = WorkloadSpec("stencil", ranks=16, nodes=4, iterations=12, seed=42)
with tempfile.TemporaryDirectory() as ckpt_dir:
    job = launch(spec, RunConfig(ckpt_dir=ckpt_dir, topology="tree"))
    job.inject_checkpoint_at(5, mid=True)
    print("checkpoint committed at iteration 5, drain windows:", job.ckpt_stats[-1]["drain_windows"])
    job.run_until(Pause(9))
    print("crash at iteration 9: killing every rank")
    job.kill_all()
    job.restart_all(lazy=True)
    print("restarted from checkpoint generation", job.committed_generation, "with new LIDs and QPNs")
    report = job.run_workload()
print(report.summary())
