"""Launch, run, checkpoint, kill and restart a workload.

A ``Computation`` owns the fabric, the control plane and one checkpoint
agent per rank. With a VIRTUAL clock a single driver steps every rank in
turn and advances time only when nobody can make progress, so a run is a
pure function of its spec and seed. With a WALL clock every rank runs in
its own thread between synchronization points and the control plane uses
loopback TCP.
"""

from __future__ import annotations

import os
import re
import tempfile
import threading
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from ..ckpt.agent import CheckpointAgent, run_lockstep, run_threaded
from ..ckpt.drain import DrainPolicy
from ..ckpt.image import ENV_DIR, image_path
from ..clock import ClockMode, VirtualClock, WallClock
from ..coordinator.backoff import BackoffPolicy, ConnectionLimiter, ConnectReport, simulate_connects
from ..coordinator.plane import ControlPlane, Topology, TopologyMode
from ..errors import CkptfError, LaunchError, RestartError
from ..fabric import Fabric, FabricConfig
from ..phase import is_legal_sequence
from ..virt import ResolvePolicy
from . import workloads as wl
from .rank import Pause, RankApp
from .report import RunReport
from .workloads import WorkloadSpec


@dataclass
class RunConfig:
    topology: TopologyMode = TopologyMode.FLAT
    clock: ClockMode = ClockMode.VIRTUAL
    resolve: ResolvePolicy = ResolvePolicy.PER_SEND
    drain: DrainPolicy | None = None
    fabric: FabricConfig | None = None
    backoff: BackoffPolicy | None = None
    connection_limit: int | None = None
    handshake: float = 1.0
    ckpt_dir: str | os.PathLike | None = None
    barrier_timeout: float | None = None
    idle_sleep: float = 0.0002  # seconds a WALL rank sleeps when it cannot progress

    def __post_init__(self) -> None:
        self.topology = TopologyMode(self.topology)
        self.clock = ClockMode(self.clock)
        self.resolve = ResolvePolicy(self.resolve)


class Computation:
    """Handle on a launched workload."""

    def __init__(self, spec: WorkloadSpec, config: RunConfig | None = None):
        self.spec = spec
        self.config = config or RunConfig()
        cfg = self.config
        self.virtual = cfg.clock is ClockMode.VIRTUAL
        self.clock = VirtualClock() if self.virtual else WallClock()
        fabric_cfg = cfg.fabric or (
            FabricConfig(rng_seed=spec.seed) if self.virtual
            else FabricConfig(latency_min=0.05, latency_max=0.5, clock_mode=ClockMode.WALL,
                              rng_seed=spec.seed))
        if fabric_cfg.clock_mode is not cfg.clock:
            raise ValueError("fabric clock mode must match the run's clock mode")
        self.fabric = Fabric(fabric_cfg, nodes=spec.nodes, clock=self.clock)
        self.drain_policy = cfg.drain or (DrainPolicy() if self.virtual else DrainPolicy.wall_default())
        self.ckpt_dir = Path(os.environ.get(ENV_DIR) or cfg.ckpt_dir
                             or tempfile.mkdtemp(prefix="ckptf-"))
        self.topology = Topology(cfg.topology, spec.nodes, spec.ranks_per_node)
        self.plane: ControlPlane | None = None
        self.agents: dict[int, CheckpointAgent] = {}
        self.connect_report: ConnectReport | None = None
        self.launch_time = 0.0
        self.run_time = 0.0
        self.committed_generation: int | None = None
        self.restarts = 0
        self.restart_time = 0.0
        self.time_to_first_resume = 0.0
        self.ckpt_stats: list[dict] = []
        self.lazy = False
        self.ctrl = {c: Counter() for c in ("launch", "protocol", "steady")}
        self._mark: dict[int, int] = {}
        self._carry: dict[int, Counter] = {r: Counter() for r in range(spec.ranks)}
        self.traces: dict[int, list] = {r: [] for r in range(spec.ranks)}

    # -- launch ------------------------------------------------------------------

    def launch(self) -> "Computation":
        cfg, spec = self.config, self.spec
        t0 = time.perf_counter()
        tree = self.topology.mode is TopologyMode.TREE
        clients = range(spec.nodes) if tree else range(spec.ranks)
        backoff = cfg.backoff or BackoffPolicy.staggered(cfg.handshake)
        limiter = (ConnectionLimiter(cfg.connection_limit, cfg.handshake)
                   if cfg.connection_limit else None)
        report = simulate_connects(clients, backoff, limiter, spec.seed, cfg.handshake)
        self.connect_report = report
        if not report.ok:
            failed = sorted(report.failed)
            if tree:
                failed = [r for r in range(spec.ranks) if self.topology.node_of(r) in report.failed]
            raise LaunchError(f"{len(report.failed)} of {len(clients)} connections to the root "
                              f"coordinator failed", failed_ranks=failed)
        self.plane = ControlPlane(self.topology, self.clock, cfg.barrier_timeout)
        if not self.virtual and tree:
            self._wait_wall(lambda: self.plane.root_session_count == spec.nodes, "sub-coordinators")
        for node in range(spec.nodes):
            self.fabric.create_hca(node)
        for r in range(spec.ranks):
            self.agents[r] = self._new_agent(r, spec, wl.rc_peers(spec, r))
        failures = self._failures(self._execute({r: a.setup() for r, a in self.agents.items()}))
        if failures:
            raise LaunchError(f"endpoint setup failed: {failures}", failed_ranks=sorted(failures))
        for a in self.agents.values():
            a.app.connect_ud()
        self._account("launch")
        self.launch_time = time.perf_counter() - t0
        return self

    def _new_agent(self, r: int, spec: WorkloadSpec, rc_peers) -> CheckpointAgent:
        session = self.plane.open_session(r)
        app = RankApp(spec, r)
        agent = CheckpointAgent(r, self.fabric, self.fabric.hca(self.topology.node_of(r)), session,
                                app, self.ckpt_dir, self.drain_policy, self.config.resolve,
                                rc_peers)
        app.bind(agent)
        self._mark[r] = session.control_messages()
        return agent

    # -- execution ---------------------------------------------------------------

    def _wait_wall(self, predicate, what: str, timeout: float = 10.0) -> None:
        deadline = time.monotonic() + timeout
        while not predicate():
            if time.monotonic() > deadline:
                raise CkptfError(f"timed out waiting for {what}")
            time.sleep(0.001)

    def _close_session(self, r: int) -> None:
        agent = self.agents.get(r)
        if agent is not None:
            agent.session.close()
        if self.plane is not None:
            self.plane.pump()

    def _execute(self, gens: dict) -> dict:
        """Run one protocol generator per rank to completion."""
        on_failure = lambda r, exc: self._close_session(r)  # noqa: E731
        if self.virtual:
            runs = {r: (g, self.agents[r].session) for r, g in gens.items()}
            return run_lockstep(runs, self.clock, self.plane.pump, on_failure)
        results: dict = {}

        def body(r, g):
            try:
                results[r] = run_threaded(g, self.agents[r].session, self.clock.sleep)
            except Exception as exc:
                results[r] = exc
                on_failure(r, exc)

        threads = [threading.Thread(target=body, args=(r, g), daemon=True) for r, g in gens.items()]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return results

    @staticmethod
    def _failures(results: dict) -> dict:
        return {r: v for r, v in results.items() if isinstance(v, BaseException)}

    def _account(self, category: str) -> None:
        for r, a in self.agents.items():
            n = a.session.control_messages()
            self.ctrl[category][r] += n - self._mark.get(r, 0)
            self._mark[r] = n

    def run_until(self, pause: Pause | None = None) -> None:
        """Step every rank until all have reached ``pause`` (or finished)."""
        if not self.agents:
            raise CkptfError("no live ranks; restart first")
        if self.virtual:
            self._run_virtual(pause)
        else:
            self._run_wall(pause)

    def _settled(self, pause: Pause | None) -> bool:
        apps = [a.app for a in self.agents.values()]
        if pause is None:
            return all(app.done for app in apps)
        return all(pause.reached(app) for app in apps)

    def _run_virtual(self, pause: Pause | None) -> None:
        agents = [self.agents[r] for r in sorted(self.agents)]
        while True:
            progressed = False
            for a in agents:
                if a.app.step(pause):
                    progressed = True
            if self._settled(pause):
                return
            if progressed:
                continue
            t = self.fabric.next_delivery_time()
            if t is None:
                raise CkptfError("no rank can make progress and nothing is in flight")
            self.clock.advance_to(t)

    def _run_wall(self, pause: Pause | None) -> None:
        errors = []

        def body(app):
            try:
                while not (app.done or (pause is not None and pause.reached(app))):
                    if not app.step(pause):
                        time.sleep(self.config.idle_sleep)
                # keep receiving so that peers still finishing their rounds are not starved
            except Exception as exc:
                errors.append(exc)

        threads = [threading.Thread(target=body, args=(a.app,), daemon=True)
                   for a in self.agents.values()]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]

    def run_workload(self) -> RunReport:
        t0 = time.perf_counter()
        self.run_until(None)
        self.run_time += time.perf_counter() - t0
        return self.report()

    # -- checkpoint, kill, restart ------------------------------------------------

    def checkpoint(self) -> bool:
        """Run one coordinated checkpoint now. True if every rank committed its image."""
        self._account("steady")
        ckpt_id = self.plane.broadcast_checkpoint()
        gens = {}
        for r, a in self.agents.items():
            got = a.session.poll_ckpt_request() if self.virtual else a.session.wait_ckpt_request()
            if got != ckpt_id:
                raise CkptfError(f"rank {r} got checkpoint request {got}, expected {ckpt_id}")
            gens[r] = a.checkpoint(ckpt_id)
        results = self._execute(gens)
        self.plane.pump()
        self._account("protocol")
        failures = self._failures(results)
        if failures:
            raise next(iter(failures.values()))
        ok = all(results.values())
        stats = [self.agents[r].stats for r in sorted(self.agents)]
        self.ckpt_stats.append({
            "id": ckpt_id, "committed": ok,
            "ckpt_time": max(s.ckpt_time for s in stats),
            "write_time": sum(s.write_time for s in stats),
            "image_bytes": [s.image_bytes for s in stats],
            "drain_windows": max(s.drain.windows for s in stats if s.drain) if stats else 0,
            "drained": sum(s.drain.drained for s in stats if s.drain),
        })
        if ok:
            self.committed_generation = self.fabric.generation
        return ok

    def inject_checkpoint_at(self, iteration: int, rnd: int = 0, mid: bool = False) -> bool:
        """Run until every rank reaches the point, then checkpoint.

        ``mid`` stops each rank right after its sends of round ``rnd`` so
        that messages are still in flight when the checkpoint starts.
        """
        self.run_until(Pause(iteration, rnd, mid))
        return self.checkpoint()

    def kill_all(self) -> None:
        """Every rank dies at once: state, sessions and in-flight traffic are lost."""
        self._account("steady")
        for r, a in self.agents.items():
            self._carry[r].update(a.app.counters)
            self._carry[r]["ud_queries"] += a.virt.queries
            self.traces[r] += a.session.trace
            a.session.close()
        self.plane.pump()
        if not self.virtual:
            self._wait_wall(lambda: not self.plane.root.participants, "sessions to close")
        self.fabric.purge()
        self.agents = {}

    def latest_generation(self, ckpt_dir=None) -> int:
        base = Path(os.environ.get(ENV_DIR) or ckpt_dir or self.ckpt_dir)
        gens = [int(m.group(1)) for p in base.glob("gen*") if (m := re.fullmatch(r"gen(\d+)", p.name))]
        if not gens:
            raise RestartError(f"no checkpoint images under {base}")
        return max(gens)

    def restart_all(self, lazy: bool = False, identity: bool = False, ckpt_dir=None,
                    spec: WorkloadSpec | None = None, generation: int | None = None) -> "Computation":
        """Rebuild every rank from its image in a new fabric generation."""
        spec = spec or self.spec
        if spec.ranks != self.spec.ranks or spec.nodes != self.spec.nodes:
            raise RestartError(f"restart asks for {spec.ranks} ranks on {spec.nodes} nodes, the "
                               f"computation has {self.spec.ranks} on {self.spec.nodes}")
        if self.agents:
            self.kill_all()
        if ckpt_dir is not None:
            self.ckpt_dir = Path(ckpt_dir)
        if generation is None:
            generation = (self.committed_generation if ckpt_dir is None
                          and self.committed_generation is not None
                          else self.latest_generation(ckpt_dir))
        self.fabric.reassign_identifiers(identity=identity)
        t0 = time.perf_counter()
        gens = {}
        for r in range(spec.ranks):
            agent = self._new_agent(r, spec, ())
            self.agents[r] = agent
            gens[r] = agent.restart(image_path(self.ckpt_dir, generation, r), lazy)
        results = self._execute(gens)
        failures = self._failures(results)
        if failures:
            for r in list(self.agents):
                self._close_session(r)
            self.agents = {}
            detail = "; ".join(f"rank {r}: {e}" for r, e in sorted(failures.items()))
            raise RestartError(f"restart aborted on every rank ({detail})")
        self._account("protocol")
        self.restarts += 1
        self.lazy = lazy
        self.restart_time = time.perf_counter() - t0
        self.time_to_first_resume = max(a.stats.time_to_first_resume for a in self.agents.values())
        return self

    # -- results -----------------------------------------------------------------

    def checksum(self) -> int:
        return wl.fold_checksum(a.app.digest() for a in self.agents.values())

    def rank_traces(self) -> dict[int, list]:
        return {r: self.traces[r] + (self.agents[r].session.trace if r in self.agents else [])
                for r in range(self.spec.ranks)}

    def counter(self, name: str) -> int:
        total = sum(c[name] for c in self._carry.values())
        for a in self.agents.values():
            total += a.virt.queries if name == "ud_queries" else a.app.counters[name]
        return total

    def report(self) -> RunReport:
        self._account("steady")
        spec = self.spec
        agents = [self.agents[r] for r in sorted(self.agents)]
        last = self.ckpt_stats[-1] if self.ckpt_stats else None
        image_bytes = last["image_bytes"] if last else [0] * spec.ranks
        write_time = last["write_time"] if last else 0.0
        m = self.fabric.metrics
        lazy_mat = lazy_total = 0
        if self.lazy:
            for a in agents:
                regions = a.restored.regions
                lazy_mat += regions.materialized_bytes
                lazy_total += regions.total_bytes
        complete = bool(agents) and all(a.app.done for a in agents)
        final = self.checksum() if agents else 0
        reference = wl.reference_checksum(spec)
        counts = {a.checkpoints for a in agents}
        report = RunReport(
            workload=spec.to_dict(),
            topology=self.topology.mode.value,
            clock=self.config.clock.value,
            resolve_policy=self.config.resolve.value,
            final_checksum=final,
            reference_checksum=reference,
            completed=complete,
            launch_time_s=self.launch_time,
            launch_connect_span=max(self.connect_report.connected_at.values(), default=0.0),
            launch_attempts=self.connect_report.attempts,
            launch_peak_concurrent=self.connect_report.peak_concurrent,
            root_sessions=self.plane.root_session_count,
            run_time_s=self.run_time,
            checkpoints=sum(1 for c in self.ckpt_stats if c["committed"]),
            aborted_checkpoints=sum(1 for c in self.ckpt_stats if not c["committed"]),
            restarts=self.restarts,
            ckpt_time_s=last["ckpt_time"] if last else 0.0,
            write_time_s=write_time,
            restart_time_s=self.restart_time,
            time_to_first_resume_s=self.time_to_first_resume,
            image_bytes_per_rank=image_bytes,
            total_image_bytes=sum(image_bytes),
            write_bandwidth_bps=sum(image_bytes) / write_time if write_time > 0 else 0.0,
            drain_windows=[c["drain_windows"] for c in self.ckpt_stats],
            drained_messages=sum(c["drained"] for c in self.ckpt_stats),
            rc_sends=self.counter("rc_sent"),
            ud_sends=self.counter("ud_sent"),
            ud_queries=self.counter("ud_queries"),
            control_messages=[self.ctrl["steady"][r] for r in range(spec.ranks)],
            control_messages_launch=[self.ctrl["launch"][r] for r in range(spec.ranks)],
            control_messages_protocol=[self.ctrl["protocol"][r] for r in range(spec.ranks)],
            misdeliveries=self.counter("misdelivered"),
            duplicates=self.counter("duplicates"),
            fabric={k: m[k] for k in ("sent", "delivered", "dropped", "blackholed", "purged",
                                      "in_flight")},
            lazy_materialized_bytes=lazy_mat,
            lazy_region_bytes=lazy_total,
        )
        report.invariants = {
            "checksum_matches_reference": not complete or final == reference,
            "fabric_conservation": self.fabric.conservation_holds(),
            "no_misdelivery": report.misdeliveries == 0,
            "no_duplicate_delivery": report.duplicates == 0,
            "legal_phase_sequences": all(is_legal_sequence(a.phases) for a in agents),
            "ranks_agree_on_checkpoints": len(counts) <= 1,
        }
        return report


def launch(spec: WorkloadSpec, config: RunConfig | None = None, **overrides) -> Computation:
    """Start the control plane and every rank, then connect their endpoints."""
    if overrides:
        config = RunConfig(**{**(vars(config) if config else {}), **overrides})
    return Computation(spec, config).launch()


def run_workload(handle: Computation) -> RunReport:
    return handle.run_workload()


def inject_checkpoint_at(handle: Computation, iteration: int, rnd: int = 0, mid: bool = False) -> bool:
    return handle.inject_checkpoint_at(iteration, rnd, mid)


def kill_all(handle: Computation) -> None:
    handle.kill_all()


def restart_all(handle: Computation, ckpt_dir=None, spec: WorkloadSpec | None = None,
                lazy: bool = False, identity: bool = False) -> Computation:
    return handle.restart_all(lazy=lazy, identity=identity, ckpt_dir=ckpt_dir, spec=spec)


def report(handle: Computation) -> RunReport:
    return handle.report()
