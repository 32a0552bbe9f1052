"""Per-rank checkpoint agent.

The checkpoint and restart protocols are generators that yield
``Barrier(name)`` or ``Sleep(duration)`` requests and leave it to a driver
to satisfy them. ``run_threaded`` blocks the calling thread; ``run_lockstep``
steps every rank of a virtual-clock run together so that one driver owns
the clock. The protocol code is the same either way.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass
from typing import Protocol

from ..errors import BarrierAborted, CheckpointError, CoordinatorError, DrainTimeout, RestartError
from ..fabric import Fabric, HcaState, QpMode, QueuePair
from ..phase import LEGAL_TRANSITIONS, Phase
from ..virt import ResolvePolicy, TranslationTable, UdVirtualizer, VirtualEndpointId, pack_real, unpack_real
from .drain import Drainer, DrainPolicy, DrainResult
from .image import MODE_RC, MODE_UD, RankState, image_path, open_lazy, read_image, serialize, write_image

SYS_REGION = "sys.endpoints"


@dataclass(frozen=True)
class Barrier:
    name: str


@dataclass(frozen=True)
class Sleep:
    duration: float


class Application(Protocol):
    def regions(self) -> dict[str, bytes]: ...

    def restore(self, regions) -> None: ...

    def deliver(self, mode: int, payload: bytes) -> None: ...


@dataclass
class RunStats:
    ckpt_time: float = 0.0
    write_time: float = 0.0
    restart_time: float = 0.0
    time_to_first_resume: float = 0.0
    image_bytes: int = 0
    drain: DrainResult | None = None
    committed: bool = False

    @property
    def write_bandwidth(self) -> float:
        return self.image_bytes / self.write_time if self.write_time > 0 else 0.0


def rc_key(a: int, b: int, owner: int) -> str:
    lo, hi = sorted((a, b))
    return f"rc:{lo}:{hi}:{owner}"


def rank_ud_key(rank: int) -> str:
    return f"rank:{rank}:ud"


def abort_key(ckpt_id: int) -> str:
    return f"ckpt:{ckpt_id}:abort"


def pack_vid(vid: VirtualEndpointId) -> bytes:
    return struct.pack("<HI", vid.vlid, vid.vqpn)


def unpack_vid(raw: bytes) -> VirtualEndpointId:
    return VirtualEndpointId(*struct.unpack("<HI", raw))


class CheckpointAgent:
    """Owns a rank's endpoints and runs its side of checkpoint and restart.

    ``rc_peers`` lists the ranks this rank keeps an RC connection with.
    The rank also owns one virtualized UD endpoint.
    """

    def __init__(self, rank: int, fabric: Fabric, hca: HcaState, session, app: Application,
                 ckpt_dir, drain_policy: DrainPolicy | None = None,
                 resolve_policy: ResolvePolicy = ResolvePolicy.PER_SEND, rc_peers=()):
        self.rank = rank
        self.fabric = fabric
        self.hca = hca
        self.session = session
        self.app = app
        self.ckpt_dir = ckpt_dir
        self.drain_policy = drain_policy or DrainPolicy()
        self.virt = UdVirtualizer(fabric, hca, session, resolve_policy)
        self.rc_peers = sorted(set(rc_peers) - {rank})
        self.rc: dict[int, QueuePair] = {}
        self.ud_vid: VirtualEndpointId | None = None
        self.drained: list[tuple[int, bytes]] = []
        self.phase = Phase.RUNNING
        self.phases: list[Phase] = [Phase.RUNNING]
        self.checkpoints = 0
        self.aborted: list[int] = []
        self.stats = RunStats()
        self.history: list[RunStats] = []
        self.last_image = None
        self.restored: RankState | None = None

    def _enter(self, phase: Phase) -> None:
        if (self.phase, phase) not in LEGAL_TRANSITIONS:
            raise CheckpointError(
                f"rank {self.rank}: illegal transition {self.phase.name} -> {phase.name}")
        self.phase = phase
        self.phases.append(phase)

    def queues(self) -> list[tuple[int, QueuePair]]:
        out = [(MODE_RC, self.rc[p]) for p in sorted(self.rc)]
        if self.ud_vid is not None:
            out.append((MODE_UD, self.virt.qp_for(self.ud_vid)))
        return out

    # -- endpoints ----------------------------------------------------------------

    def _publish_rc(self) -> None:
        for peer in self.rc_peers:
            qp = self.fabric.create_qp(self.hca, QpMode.RC)
            self.rc[peer] = qp
            self.session.publish(rc_key(self.rank, peer, self.rank), pack_real(qp.address),
                                 qp.generation)

    def _connect_rc(self) -> None:
        # the lower rank of each pair makes the connection
        for peer in self.rc_peers:
            if peer < self.rank:
                continue
            entry = self.session.query(rc_key(self.rank, peer, peer))
            if entry is None:
                raise RestartError(f"rank {self.rank}: peer {peer} never published its RC endpoint")
            remote = self.fabric.lookup(unpack_real(entry.value))
            if remote is None:
                raise RestartError(f"rank {self.rank}: RC endpoint of {peer} is stale")
            self.fabric.rc_connect(self.rc[peer], remote)

    def setup(self):
        """Create endpoints at launch and connect RC pairs through the coordinator."""
        self._publish_rc()
        self.ud_vid = self.virt.create_qp()
        self.session.publish(rank_ud_key(self.rank), pack_vid(self.ud_vid))
        yield Barrier("endpoints")
        self._connect_rc()
        yield Barrier("connected")

    def lookup_rank_vid(self, rank: int) -> VirtualEndpointId:
        entry = self.session.query(rank_ud_key(rank))
        if entry is None:
            raise CheckpointError(f"rank {rank} has no UD endpoint")
        return unpack_vid(entry.value)

    # -- checkpoint -------------------------------------------------------------

    def _sink(self, mode: int, payload: bytes) -> None:
        self.drained.append((mode, payload))

    def snapshot(self) -> RankState:
        regions = dict(self.app.regions())
        regions[SYS_REGION] = self._endpoint_record()
        return RankState(self.rank, self.fabric.generation, regions, self.virt.table.snapshot(),
                         list(self.drained))

    def _endpoint_record(self) -> bytes:
        handles = sorted([hid, list(self.virt.handle(hid).target)] for hid in self.virt.handle_ids())
        return json.dumps({"rc_peers": self.rc_peers, "ud_vid": list(self.ud_vid or ()),
                           "handles": handles}, sort_keys=True).encode()

    def checkpoint(self, ckpt_id: int):
        """Suspend, drain, write the image and resume.

        Any failure (a drain that never settles, a lost peer, a failed write)
        aborts the checkpoint on every rank and the computation carries on.
        Returns True if the image was committed everywhere.
        """
        t0 = time.perf_counter()
        stats = RunStats()
        failed = False
        try:
            self._enter(Phase.SUSPENDED)
            self.session.phase_ack(ckpt_id, Phase.SUSPENDED)
            yield Barrier("suspend")
            self._enter(Phase.DRAINING)
            drainer = Drainer(self.fabric, self.queues(), self.drain_policy, self._sink)
            try:
                while not drainer.done:
                    yield Sleep(self.drain_policy.window)
                    drainer.window()
            except DrainTimeout:
                failed = True
                self.session.publish(abort_key(ckpt_id), b"drain")
            stats.drain = drainer.result()
            yield Barrier("drained")
            failed = failed or self.session.query(abort_key(ckpt_id)) is not None
            if not failed:
                self._enter(Phase.WRITING)
                tw = time.perf_counter()
                path = image_path(self.ckpt_dir, self.fabric.generation, self.rank)
                try:
                    stats.image_bytes = write_image(path, serialize(self.snapshot()))
                except OSError:
                    failed = True
                    self.session.publish(abort_key(ckpt_id), b"write")
                stats.write_time = time.perf_counter() - tw
                yield Barrier("written")
                failed = failed or self.session.query(abort_key(ckpt_id)) is not None
                if not failed:
                    self.last_image = path
        except BarrierAborted:
            failed = True
        except CoordinatorError:
            failed = True
        if failed:
            self.aborted.append(ckpt_id)
        else:
            self.checkpoints += 1
        stats.committed = not failed
        self._enter(Phase.RESUMING)
        self._redeliver()
        self._enter(Phase.RUNNING)
        try:
            self.session.phase_ack(ckpt_id, Phase.RUNNING)
        except CoordinatorError:
            pass
        stats.ckpt_time = time.perf_counter() - t0
        self.stats = stats
        self.history.append(stats)
        return not failed

    def _redeliver(self) -> None:
        pending, self.drained = self.drained, []
        for mode, payload in pending:
            self.app.deliver(mode, payload)

    # -- restart ----------------------------------------------------------------

    def load(self, path, lazy: bool = False) -> RankState:
        try:
            state = open_lazy(path) if lazy else read_image(path)
        except FileNotFoundError as exc:
            raise RestartError(f"rank {self.rank}: no image at {path}") from exc
        if state.rank != self.rank:
            raise RestartError(f"image {path} belongs to rank {state.rank}, not {self.rank}")
        return state

    def restart(self, path, lazy: bool = False):
        """Rebuild this rank from its image in a fresh fabric generation.

        With ``lazy`` the image is memory-mapped and region payloads are only
        copied when the application first reads them.
        """
        t0 = time.perf_counter()
        self.phase = Phase.RESTARTING
        self.phases = [Phase.RESTARTING]
        state = self.load(path, lazy)
        self.restored = state
        record = json.loads(bytes(state.regions[SYS_REGION]))
        self.rc_peers = record["rc_peers"]
        self.app.restore(state.regions)
        self.virt.table = TranslationTable.from_snapshot(state.table)
        self.ud_vid = VirtualEndpointId(*record["ud_vid"]) if record["ud_vid"] else None
        for hid, target in record["handles"]:
            self.virt.restore_handle(hid, VirtualEndpointId(*target))
        self.drained = list(state.drained)
        self.last_image = path
        self.stats = RunStats()
        self._publish_rc()
        self.virt.refresh_after_restart()
        yield Barrier("republished")
        self._connect_rc()
        yield Barrier("reconnected")
        self._enter(Phase.RESUMING)
        self._redeliver()
        self._enter(Phase.RUNNING)
        self.stats.restart_time = time.perf_counter() - t0
        self.stats.time_to_first_resume = self.stats.restart_time
        return True


def run_threaded(gen, session, sleep):
    """Drive a protocol generator from the current thread."""
    request = gen.send(None)
    while True:
        try:
            if isinstance(request, Barrier):
                try:
                    session.barrier(request.name)
                except CoordinatorError as exc:
                    request = gen.throw(BarrierAborted(str(exc)))
                    continue
            else:
                sleep(request.duration)
            request = gen.send(None)
        except StopIteration as stop:
            return stop.value


def run_lockstep(runs: dict, clock, pump, on_failure=None) -> dict:
    """Drive several protocol generators on one virtual clock.

    ``runs`` maps a key to ``(generator, session)``. Sleeps are served first,
    advancing the shared clock to the earliest wake-up; once every live
    generator is waiting at a barrier, all of them enter it and then wait
    for the release. A generator that raises is reported through
    ``on_failure(key, exc)`` (which should close its session so the others'
    barriers abort) and its exception is returned in place of a result.
    """
    results: dict = {}
    pending: dict = {}
    wake: dict = {}

    def step(key, exc=None) -> None:
        gen = runs[key][0]
        try:
            req = gen.throw(exc) if exc is not None else gen.send(None)
        except StopIteration as stop:
            results[key] = stop.value
            pending.pop(key, None)
            return
        except Exception as err:
            results[key] = err
            pending.pop(key, None)
            if on_failure is not None:
                on_failure(key, err)
            return
        pending[key] = req
        if isinstance(req, Sleep):
            wake[key] = clock.now() + req.duration

    for key in runs:
        step(key)
    while pending:
        sleepers = [k for k, r in pending.items() if isinstance(r, Sleep)]
        if sleepers:
            t = min(wake[k] for k in sleepers)
            clock.advance_to(t)
            for k in sleepers:
                if wake[k] <= clock.now():
                    del wake[k]
                    step(k)
            continue
        entered = {}
        for k in sorted(pending):
            session = runs[k][1]
            try:
                entered[k] = session.enter_barrier(pending[k].name)
            except CoordinatorError as exc:
                entered[k] = exc
        pump()
        for k, seq in entered.items():
            if isinstance(seq, Exception):
                step(k, BarrierAborted(str(seq)))
                continue
            try:
                runs[k][1].wait_barrier(pending[k].name, seq)
            except CoordinatorError as exc:
                step(k, exc if isinstance(exc, BarrierAborted) else BarrierAborted(str(exc)))
                continue
            step(k)
    return results
