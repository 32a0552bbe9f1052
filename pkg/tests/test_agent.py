import pytest

from ckptf.ckpt import agent as agent_mod
from ckptf.ckpt.agent import Barrier, CheckpointAgent, Sleep, run_lockstep
from ckptf.ckpt.drain import DrainPolicy
from ckptf.ckpt.image import MODE_RC, MODE_UD, image_path, read_image
from ckptf.errors import RestartError
from ckptf.phase import Phase, is_legal_sequence


class Notebook:
    """A minimal application: one region of state and a log of deliveries."""

    def __init__(self, rank):
        self.rank = rank
        self.state = bytes([rank]) * 16
        self.got = []

    def regions(self):
        return {"nb.state": self.state}

    def restore(self, regions):
        self.state = bytes(regions["nb.state"])

    def deliver(self, mode, payload):
        self.got.append((mode, payload))


def build(world, ckpt_dir, n=2, drain=None, **fabric_kw):
    w = world(ranks=n, **fabric_kw)
    agents = {r: CheckpointAgent(r, w.fabric, w.hcas[r], w.sessions[r], Notebook(r), ckpt_dir,
                                 drain or DrainPolicy(window=10), rc_peers=[p for p in range(n) if p != r])
              for r in range(n)}
    run(w, agents, {r: a.setup() for r, a in agents.items()})
    return w, agents


def run(w, agents, gens):
    def fail(r, exc):
        agents[r].session.close()
        w.plane.pump()
    runs = {r: (g, agents[r].session) for r, g in gens.items()}
    return run_lockstep(runs, w.clock, w.plane.pump, fail)


def checkpoint(w, agents):
    ckpt = w.plane.broadcast_checkpoint()
    assert all(a.session.poll_ckpt_request() == ckpt for a in agents.values())
    results = run(w, agents, {r: a.checkpoint(ckpt) for r, a in agents.items()})
    w.plane.pump()
    return results


def test_quiet_checkpoint_uses_one_empty_window(world, ckpt_dir):
    w, agents = build(world, ckpt_dir)
    assert checkpoint(w, agents) == {0: True, 1: True}
    for a in agents.values():
        assert a.stats.drain.windows == 1 and a.stats.drain.drained == 0
        assert a.phases == [Phase.RUNNING, Phase.SUSPENDED, Phase.DRAINING, Phase.WRITING,
                            Phase.RESUMING, Phase.RUNNING]
        assert is_legal_sequence(a.phases)
    assert w.plane.root.completed_checkpoints == [1]


def test_in_flight_rc_messages_are_drained_stored_and_redelivered(world, ckpt_dir):
    w, agents = build(world, ckpt_dir)
    sent = [bytes([i]) * 4 for i in range(5)]
    for p in sent:
        w.fabric.post_send(agents[0].rc[1], None, p)
    assert all(checkpoint(w, agents).values())
    assert agents[1].stats.drain.drained == 5
    stored = read_image(image_path(ckpt_dir, 0, 1)).drained
    assert stored == [(MODE_RC, p) for p in sent]
    assert agents[1].app.got == [(MODE_RC, p) for p in sent]
    assert agents[1].drained == []
    assert w.fabric.conservation_holds()


def test_ud_in_flight_messages_are_drained(world, ckpt_dir):
    w, agents = build(world, ckpt_dir)
    h = agents[0].virt.vcreate_ah(agents[1].ud_vid)
    agents[0].virt.vsend(h, agents[0].ud_vid, b"ud!")
    assert all(checkpoint(w, agents).values())
    assert agents[1].app.got == [(MODE_UD, b"ud!")]


def test_restart_redelivers_drained_store_exactly_once(world, ckpt_dir):
    w, agents = build(world, ckpt_dir)
    w.fabric.post_send(agents[0].rc[1], None, b"late")
    assert all(checkpoint(w, agents).values())
    assert agents[1].app.got == [(MODE_RC, b"late")]

    # everyone dies and comes back from the images
    for a in agents.values():
        a.session.close()
    w.plane.pump()
    w.fabric.purge()
    w.fabric.reassign_identifiers()
    fresh = {}
    for r in range(2):
        s = w.plane.open_session(r)
        fresh[r] = CheckpointAgent(r, w.fabric, w.hcas[r], s, Notebook(99), ckpt_dir)
    results = run(w, fresh, {r: a.restart(image_path(ckpt_dir, 0, r)) for r, a in fresh.items()})
    assert results == {0: True, 1: True}
    assert fresh[1].app.got == [(MODE_RC, b"late")]
    assert fresh[0].app.state == bytes([0]) * 16
    assert fresh[1].phases == [Phase.RESTARTING, Phase.RESUMING, Phase.RUNNING]
    # the RC pair is live again in the new generation
    w.fabric.post_send(fresh[0].rc[1], None, b"again")
    w.settle()
    assert [d.payload for d in w.fabric.poll_recv(fresh[1].rc[0])] == [b"again"]


def test_drain_timeout_aborts_everywhere_and_resumes(world, ckpt_dir):
    w, agents = build(world, ckpt_dir, drain=DrainPolicy(window=1, max_windows=2),
                      latency_min=1, latency_max=40)
    # one arrival per tick, so no window is ever empty
    ticks = iter(range(1, 41))
    w.fabric._latency = lambda: next(ticks)
    for i in range(40):
        w.fabric.post_send(agents[0].rc[1], None, bytes([i]))
    assert checkpoint(w, agents) == {0: False, 1: False}
    for a in agents.values():
        assert a.phase is Phase.RUNNING and a.aborted == [1]
        assert is_legal_sequence(a.phases)
        assert Phase.WRITING not in a.phases
    assert not image_path(ckpt_dir, 0, 0).exists()
    # nothing was lost: what was drained went to the app, the rest is still in flight
    assert len(agents[1].app.got) + w.fabric.in_flight() == 40


def test_write_failure_aborts_and_keeps_previous_image(world, ckpt_dir, monkeypatch):
    w, agents = build(world, ckpt_dir)
    assert all(checkpoint(w, agents).values())
    before = image_path(ckpt_dir, 0, 1).read_bytes()
    agents[1].app.state = b"changed"
    real = agent_mod.write_image

    def flaky(path, data):
        if path.name == "rank1.img":
            raise OSError("disk full")
        return real(path, data)

    monkeypatch.setattr(agent_mod, "write_image", flaky)
    assert checkpoint(w, agents) == {0: False, 1: False}
    assert image_path(ckpt_dir, 0, 1).read_bytes() == before
    assert [a.checkpoints for a in agents.values()] == [1, 1]


def test_lost_peer_aborts_the_checkpoint(world, ckpt_dir):
    w, agents = build(world, ckpt_dir, n=3)
    ckpt = w.plane.broadcast_checkpoint()
    agents[2].session.close()
    w.plane.pump()
    res = run(w, agents, {r: agents[r].checkpoint(ckpt) for r in (0, 1)})
    assert res == {0: False, 1: False}


def test_restart_refuses_missing_or_foreign_images(world, ckpt_dir):
    w, agents = build(world, ckpt_dir)
    assert all(checkpoint(w, agents).values())
    a = agents[0]
    with pytest.raises(RestartError):
        a.load(ckpt_dir / "gen9" / "rank0.img")
    with pytest.raises(RestartError):
        a.load(image_path(ckpt_dir, 0, 1))


def test_lockstep_serves_sleeps_before_barriers(world, ckpt_dir):
    w = world(ranks=2)
    log = []

    def proto(r, naps):
        for d in naps:
            yield Sleep(d)
            log.append((r, w.clock.now()))
        yield Barrier("meet")
        log.append((r, "met", w.clock.now()))
        return r

    runs = {0: (proto(0, [5, 5]), w.sessions[0]), 1: (proto(1, [3]), w.sessions[1])}
    assert run_lockstep(runs, w.clock, w.plane.pump) == {0: 0, 1: 1}
    assert log[:3] == [(1, 3), (0, 5), (0, 10)]
    assert {e[2] for e in log[3:]} == {10}
