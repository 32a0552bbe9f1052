"""Compare per-send and cached UD address resolution across restarts."""

import tempfile

from ckptf.harness import Pause, RunConfig, WorkloadSpec, launch

spec = WorkloadSpec("stencil", ranks=8, nodes=2, iterations=40, seed=7)
for resolve in ("per_send", "generation_cached"):
    with tempfile.TemporaryDirectory() as ckpt_dir:
        job = launch(spec, RunConfig(ckpt_dir=ckpt_dir, resolve=resolve))
        for at, identity in [(10, True), (25, False)]:
            job.inject_checkpoint_at(at, mid=True)
            job.run_until(Pause(at + 3))
            job.kill_all()
            job.restart_all(identity=identity)
        rep = job.run_workload()
    print(f"{resolve:18s} ud sends {rep.ud_sends:5d}  queries {rep.ud_queries:5d}  "
          f"misdelivered {rep.misdeliveries}  blackholed {rep.fabric['blackholed']}  "
          f"checksum ok {rep.checksum_ok}")
