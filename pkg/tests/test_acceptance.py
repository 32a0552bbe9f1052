import io
import json
import random
import time
from contextlib import redirect_stdout

import pytest

from ckptf import filltime as ft
from ckptf.cli import main
from ckptf.ckpt.drain import DrainPolicy, drain
from ckptf.ckpt.image import RankState, image_path, parse, serialize
from ckptf.clock import VirtualClock
from ckptf.coordinator import BackoffPolicy
from ckptf.errors import ImageCorrupt, LaunchError, RestartError
from ckptf.fabric import Fabric, FabricConfig
from ckptf.harness import Pause, RunConfig, WorkloadSpec, launch, reference_checksum
from ckptf.harness import workloads as wl


def verdict(n, ok, detail):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0

    def ok(self):
        return self.elapsed < self.seconds


# 1 ---------------------------------------------------------------------------------

EXPECTED_IDEAL = {
    "Stampede (TACC)": 6.7,
    "Jaguar (ORNL)": 9.4,
    "Titan (ORNL)": 11.0,
    "Sunway TaihuLight": 25.0,
    "CCR (UB)": 2.3,
    "Theoretical Exascale": 1.6,
}


@pytest.mark.criterion(1, "fill-time table regression")
def test_criterion_1_table_regression():
    out = io.StringIO()
    with Budget(1.0) as b, redirect_stdout(out):
        assert main(["filltime", "--table1", "--json"]) == 0
    rows = {row["name"]: row for row in map(json.loads, out.getvalue().splitlines())}
    errors = {name: rows[name]["ideal_ckpt_time_min"] - want for name, want in EXPECTED_IDEAL.items()}
    within = all(abs(e) <= 0.15 for e in errors.values())
    ssd_flagged = "law-inconsistent" in rows["SSD-based 4-core node"]["flags"]
    worst = max(errors, key=lambda k: abs(errors[k]))
    verdict(1, within and ssd_flagged and b.ok(),
            f"worst row {worst} off by {errors[worst]:+.3f} min, SSD flagged={ssd_flagged}, "
            f"{b.elapsed:.3f} s")


# 2 ---------------------------------------------------------------------------------

SSD = next(s for s in ft.TABLE1 if s.name.startswith("SSD"))
STAMPEDE = next(s for s in ft.TABLE1 if s.name.startswith("Stampede"))


@pytest.mark.criterion(2, "partial-dump worked examples")
def test_criterion_2_partial_dump_small_node():
    with Budget(1.0) as b:
        seconds = ft.partial_dump_time(SSD, 3 * ft.GB) * 60
    verdict(2, abs(seconds - 5.9) <= 0.1 and b.ok(),
            f"3 GB on the SSD node: {seconds:.3f} s (want 5.9 +- 0.1)")


@pytest.mark.criterion(2, "partial-dump worked examples")
def test_criterion_2_partial_dump_large_system():
    with Budget(1.0) as b:
        minutes = ft.partial_dump_time(STAMPEDE, 0.192 * STAMPEDE.storage_ram)
    verdict(2, abs(minutes - 1.29) <= 0.02 and b.ok(),
            f"19.2% of Stampede RAM: {minutes:.4f} min (want 1.29 +- 0.02)")


# 3 ---------------------------------------------------------------------------------

def random_trial(rng, tmp):
    kind = rng.choice(list(wl.WorkloadKind))
    ranks = rng.randint(4, 64)
    nodes = rng.choice([d for d in range(1, ranks + 1) if ranks % d == 0 and ranks // d <= 16])
    spec = WorkloadSpec(kind, ranks=ranks, nodes=nodes, iterations=rng.randint(3, 6),
                        seed=rng.randrange(10**6))
    at = rng.randrange(spec.iterations)
    rnd = rng.randrange(len(wl.rounds(spec, 0, at)))
    c = launch(spec, RunConfig(ckpt_dir=tmp, topology=rng.choice(["flat", "tree"])))
    c.run_until(Pause(at, rnd, after_sends=True))
    committed = c.checkpoint()
    c.run_until(Pause(rng.randint(at, spec.iterations)))
    c.kill_all()
    c.restart_all(identity=False, lazy=rng.random() < 0.5)
    rep = c.run_workload()
    return spec, committed, rep


@pytest.mark.criterion(3, "crash-consistency over 100 randomized trials")
def test_criterion_3_crash_consistency(tmp_path):
    rng = random.Random(2024)
    good = 0
    with Budget(120.0) as b:
        for trial in range(100):
            spec, committed, rep = random_trial(rng, tmp_path / f"t{trial}")
            if committed and rep.completed and rep.final_checksum == reference_checksum(spec) \
                    and rep.ok:
                good += 1
    verdict(3, good == 100 and b.ok(), f"{good}/100 trials matched the oracle in {b.elapsed:.1f} s")


# 4 ---------------------------------------------------------------------------------

UD_SPEC = WorkloadSpec("stencil", ranks=32, nodes=4, iterations=320, seed=11)
RESTARTS = [(60, True), (140, False), (230, True)]


def ud_run(resolve, tmp):
    c = launch(UD_SPEC, RunConfig(ckpt_dir=tmp, resolve=resolve))
    traces = []
    for at, identity in RESTARTS:
        assert c.inject_checkpoint_at(at, rnd=0, mid=True)
        c.run_until(Pause(at + 7))
        traces.append({r: list(a.app.ud_trace) for r, a in c.agents.items()})
        c.kill_all()
        c.restart_all(identity=identity)
    rep = c.run_workload()
    traces.append({r: list(a.app.ud_trace) for r, a in c.agents.items()})
    return rep, traces


@pytest.mark.criterion(4, "UD virtualization across restarts")
def test_criterion_4_ud_virtualization(tmp_path):
    with Budget(60.0) as b:
        per_send, t1 = ud_run("per_send", tmp_path / "a")
        cached, t2 = ud_run("generation_cached", tmp_path / "b")
    reps = (per_send, cached)
    sends = min(r.ud_sends for r in reps)
    clean = all(r.misdeliveries == 0 and r.fabric["blackholed"] == 0 for r in reps)
    correct = all(r.restarts == 3 and r.checksum_ok and r.ok for r in reps)
    verdict(4, sends >= 10_000 and clean and correct and t1 == t2 and b.ok(),
            f"{sends} UD sends per mode, misdeliveries {[r.misdeliveries for r in reps]}, "
            f"blackholed {[r.fabric['blackholed'] for r in reps]}, traces equal={t1 == t2}, "
            f"{b.elapsed:.1f} s")


# 5 ---------------------------------------------------------------------------------

W = 10


def drain_schedule(latencies):
    clock = VirtualClock()
    fab = Fabric(FabricConfig(latency_min=0, latency_max=max(latencies, default=0)), nodes=2,
                 clock=clock)
    src = fab.create_qp(fab.create_hca(0), "UD")
    dst = fab.create_qp(fab.create_hca(1), "UD")
    for i, lat in enumerate(latencies):
        fab._latency = lambda lat=lat: lat
        fab.post_send(src, dst.address, bytes([i % 256]))
    got = []
    res = drain(fab, [("UD", dst)], DrainPolicy(window=W), sink=lambda mode, p: got.append(p))
    lost = len(latencies) - len(got) - fab.in_flight()
    return res, got, lost, fab


@pytest.mark.criterion(5, "drain window law")
def test_criterion_5_drain_law():
    results = {}
    with Budget(10.0) as b:
        for latency in (0, W // 2, 3 * W // 2, 5 * W // 2):
            schedule = sorted({*range(0, latency, W // 2), latency})
            res, got, lost, fab = drain_schedule(schedule)
            results[latency] = (res.windows, len(got) == len(schedule) and lost == 0)
        res, got, lost, _ = drain_schedule([1, 3, 7, 9, 10])
    windows = [w for w, _ in results.values()]
    no_loss = all(ok for _, ok in results.values())
    two_window = res.per_window == [5, 0] and lost == 0
    verdict(5, windows == [1, 2, 3, 4] and no_loss and two_window and b.ok(),
            f"windows {windows}, nothing lost={no_loss}, single-window burst "
            f"per_window={res.per_window}, {b.elapsed:.3f} s")


# 6 ---------------------------------------------------------------------------------

@pytest.mark.criterion(6, "RC sends need no control traffic")
def test_criterion_6_rc_path_has_no_control_traffic(tmp_path):
    with Budget(10.0) as b:
        c = launch(WorkloadSpec("ring", ranks=16, nodes=4, iterations=20), RunConfig(ckpt_dir=tmp_path))
        assert c.inject_checkpoint_at(10, mid=True)
        rep = c.run_workload()
    verdict(6, rep.steady_control_messages == 0 and rep.rc_sends > 0 and rep.checksum_ok
            and b.ok(),
            f"{rep.rc_sends} RC sends, {rep.steady_control_messages} steady control messages, "
            f"{b.elapsed:.2f} s")


# 7 ---------------------------------------------------------------------------------

TOPO_SPEC = WorkloadSpec("allreduce", ranks=64, nodes=8, iterations=6, seed=5)


def topo_run(topology, tmp):
    c = launch(TOPO_SPEC, RunConfig(ckpt_dir=tmp, topology=topology))
    assert c.inject_checkpoint_at(2, rnd=1, mid=True)
    c.run_until(Pause(4))
    c.kill_all()
    c.restart_all()
    rep = c.run_workload()
    phases = {r: a.phases for r, a in c.agents.items()}
    return rep, c.rank_traces(), phases


@pytest.mark.criterion(7, "tree and flat topologies agree, tree cuts root fan-in")
def test_criterion_7_tree_flat_equivalence(tmp_path):
    with Budget(30.0) as b:
        flat, flat_traces, flat_phases = topo_run("flat", tmp_path / "flat")
        tree, tree_traces, tree_phases = topo_run("tree", tmp_path / "tree")
        try:
            launch(TOPO_SPEC, RunConfig(ckpt_dir=tmp_path / "storm", connection_limit=16,
                                        backoff=BackoffPolicy.storm()))
            storm_failed = False
        except LaunchError:
            storm_failed = True
        tree_storm = launch(TOPO_SPEC, RunConfig(ckpt_dir=tmp_path / "ts", connection_limit=16,
                                                 topology="tree", backoff=BackoffPolicy.storm()))
        staggered = launch(TOPO_SPEC, RunConfig(ckpt_dir=tmp_path / "st", connection_limit=16))
    same = flat_traces == tree_traces and flat_phases == tree_phases
    correct = flat.checksum_ok and tree.checksum_ok and flat.ok and tree.ok
    fan_in = (flat.root_sessions, tree.root_sessions) == (64, 8)
    launches = storm_failed and tree_storm.plane is not None and staggered.plane is not None
    verdict(7, same and correct and fan_in and launches and b.ok(),
            f"traces identical={same}, root sessions flat/tree={flat.root_sessions}/"
            f"{tree.root_sessions}, flat storm failed={storm_failed}, tree storm and staggered "
            f"flat launched, {b.elapsed:.1f} s")


# 8 ---------------------------------------------------------------------------------

def random_state(rng):
    return RankState(
        rank=rng.randrange(1 << 32), generation=rng.randrange(1 << 32),
        regions={f"region.{i}.{rng.randrange(1000)}": rng.randbytes(rng.randrange(512))
                 for i in range(rng.randrange(6))},
        table=[((rng.randrange(1 << 16), rng.randrange(1 << 32)),
                (rng.randrange(1 << 16), rng.randrange(1 << 32), rng.randrange(1 << 32)),
                rng.random() < 0.5) for _ in range(rng.randrange(6))],
        drained=[(rng.randrange(2), rng.randbytes(rng.randrange(64)))
                 for _ in range(rng.randrange(6))])


def refused(blob):
    try:
        parse(blob)
    except ImageCorrupt:
        return True
    return False


@pytest.mark.criterion(8, "image round-trip and corruption refusal")
def test_criterion_8_image_integrity(tmp_path):
    rng = random.Random(8)
    exact = flips_refused = 0
    with Budget(30.0) as b:
        for _ in range(1000):
            state = random_state(rng)
            blob = serialize(state)
            exact += parse(blob) == state and serialize(parse(blob)) == blob
            bad = bytearray(blob)
            bit = rng.randrange(len(blob) * 8)
            bad[bit // 8] ^= 1 << (bit % 8)
            flips_refused += refused(bytes(bad))

        # corruption on disk makes a real restart refuse on every rank
        spec = WorkloadSpec("ring", ranks=4, nodes=2, iterations=4)
        c = launch(spec, RunConfig(ckpt_dir=tmp_path))
        assert c.inject_checkpoint_at(2)
        c.kill_all()
        restart_refusals = 0
        for trial in range(20):
            path = image_path(tmp_path, c.committed_generation, rng.randrange(spec.ranks))
            good = path.read_bytes()
            bad = bytearray(good)
            bit = rng.randrange(len(good) * 8)
            bad[bit // 8] ^= 1 << (bit % 8)
            path.write_bytes(bytes(bad))
            try:
                c.restart_all()
            except RestartError:
                restart_refusals += 1
            finally:
                path.write_bytes(good)
        c.restart_all()
        rep = c.run_workload()
    verdict(8, exact == 1000 and flips_refused == 1000 and restart_refusals == 20
            and rep.checksum_ok and b.ok(),
            f"{exact}/1000 byte-exact, {flips_refused}/1000 bit flips refused, "
            f"{restart_refusals}/20 corrupted restarts refused, {b.elapsed:.1f} s")


# 9 ---------------------------------------------------------------------------------

BIG_SPEC = WorkloadSpec("ring", ranks=2, nodes=2, iterations=6, heap_regions=32,
                        heap_bytes=2 * 1024 * 1024, seed=9)


@pytest.mark.criterion(9, "lazy restart matches eager and resumes no later")
def test_criterion_9_lazy_restart(tmp_path):
    with Budget(60.0) as b:
        c = launch(BIG_SPEC, RunConfig(ckpt_dir=tmp_path))
        assert c.inject_checkpoint_at(3)
        image_bytes = c.report().image_bytes_per_rank
        wins, sums = 0, set()
        for _ in range(3):
            c.restart_all(lazy=False)
            eager = c.time_to_first_resume
            c.restart_all(lazy=True)
            lazy = c.time_to_first_resume
            wins += lazy <= eager
        c.restart_all(lazy=True)
        sums.add(c.run_workload().final_checksum)
        c.restart_all(lazy=False)
        sums.add(c.run_workload().final_checksum)
    big = min(image_bytes) >= 64 * 1024 * 1024
    same = sums == {reference_checksum(BIG_SPEC)}
    verdict(9, big and same and wins == 3 and b.ok(),
            f"image {min(image_bytes) / 2**20:.1f} MiB per rank, checksums equal={same}, lazy "
            f"resumed no later in {wins}/3 runs, {b.elapsed:.1f} s")
