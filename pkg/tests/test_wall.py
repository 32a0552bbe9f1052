"""Runs with real threads, real time and loopback TCP control traffic."""

import pytest

from ckptf.harness import Pause, RunConfig, WorkloadSpec, launch

pytestmark = pytest.mark.wall


@pytest.mark.parametrize("topology", ["flat", "tree"])
@pytest.mark.parametrize("kind", ["ring", "stencil", "allreduce"])
def test_wall_run_matches_reference(kind, topology, tmp_path):
    spec = WorkloadSpec(kind, ranks=4, nodes=2, iterations=5, seed=11)
    c = launch(spec, RunConfig(clock="wall", topology=topology, ckpt_dir=tmp_path))
    try:
        rep = c.run_workload()
    finally:
        c.plane.close()
    assert rep.completed and rep.checksum_ok and rep.ok
    assert rep.root_sessions == (2 if topology == "tree" else 4)


@pytest.mark.parametrize("mid", [False, True])
def test_wall_checkpoint_kill_restart(mid, tmp_path):
    spec = WorkloadSpec("stencil", ranks=4, nodes=2, iterations=6, seed=2)
    c = launch(spec, RunConfig(clock="wall", topology="tree", ckpt_dir=tmp_path))
    try:
        assert c.inject_checkpoint_at(2, mid=mid)
        c.run_until(Pause(4))
        c.kill_all()
        c.restart_all(lazy=mid)
        rep = c.run_workload()
    finally:
        c.plane.close()
    assert rep.completed and rep.checksum_ok and rep.ok
    assert rep.restarts == 1 and rep.misdeliveries == 0
