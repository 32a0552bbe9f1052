"""Deterministic simulated interconnect with RC and UD queue pairs.

Every real identifier (LID, QPN) is scoped to a fabric *generation*.
``reassign_identifiers`` starts a new generation, handing every HCA a new
LID and restarting QPN allocation at a new base, the way a restarted job
lands on a fabric whose subnet manager and drivers know nothing of the old
run. Addresses carry their generation so that a stale address never
reaches a live queue pair, even when the numeric values happen to repeat.
"""

from __future__ import annotations

import heapq
import itertools
import random
import threading
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

from .clock import ClockMode, VirtualClock, WallClock
from .errors import (
    FabricError,
    NotQuiescedError,
    QueueFullError,
    StaleGenerationError,
)

MAX_LID = 0xBFFF  # top of the unicast LID range
QPN_MASK = (1 << 24) - 1
FIRST_QPN = 2  # QP0 and QP1 are reserved for management traffic


class QpMode(str, Enum):
    RC = "RC"
    UD = "UD"


class RealAddress(NamedTuple):
    lid: int
    qpn: int
    generation: int


@dataclass
class FabricConfig:
    latency_min: float = 1
    latency_max: float = 4
    ud_drop_rate: float = 0.0
    mtu: int = 4096
    clock_mode: ClockMode = ClockMode.VIRTUAL
    rng_seed: int = 0
    queue_capacity: int = 1 << 16
    record_trace: bool = False

    def __post_init__(self) -> None:
        self.clock_mode = ClockMode(self.clock_mode)
        if not 0 <= self.latency_min <= self.latency_max:
            raise ValueError("need 0 <= latency_min <= latency_max")
        if not 0.0 <= self.ud_drop_rate <= 1.0:
            raise ValueError("ud_drop_rate must be in [0, 1]")
        if self.mtu <= 0 or self.queue_capacity <= 0:
            raise ValueError("mtu and queue_capacity must be positive")


@dataclass
class Datagram:
    src: RealAddress
    dst: RealAddress
    payload: bytes
    deliver_at: float
    seq: int
    mode: QpMode


@dataclass(eq=False)
class HcaState:
    node: int
    lid: int
    next_qpn: int
    generation: int
    qpn_base: int = field(init=False)

    def __post_init__(self) -> None:
        self.qpn_base = self.next_qpn


@dataclass(eq=False)
class QueuePair:
    owner: HcaState
    qpn: int
    mode: QpMode
    generation: int
    capacity: int
    peer: RealAddress | None = None
    destroyed: bool = False
    _pending: list = field(default_factory=list, repr=False)
    _last_rc_deliver: float = field(default=float("-inf"), repr=False)

    @property
    def address(self) -> RealAddress:
        return RealAddress(self.owner.lid, self.qpn, self.generation)

    @property
    def depth(self) -> int:
        return len(self._pending)


class Fabric:
    """A single-subnet simulated fabric.

    In VIRTUAL mode the caller owns the clock and must advance it; in WALL
    mode time is real milliseconds and all operations are serialized by one
    lock so ranks may call in from their own threads.
    """

    def __init__(self, config: FabricConfig | None = None, nodes: int = 0, clock=None):
        self.config = config or FabricConfig()
        if clock is None:
            clock = VirtualClock() if self.config.clock_mode is ClockMode.VIRTUAL else WallClock()
        self.clock = clock
        self.generation = 0
        self._rng = random.Random(self.config.rng_seed)
        self._lock = threading.RLock()
        self._seq = itertools.count()
        self._nodes: set[int] = set()
        self._hcas: dict[int, HcaState] = {}
        self._qps: dict[RealAddress, QueuePair] = {}
        self._busy: set[QueuePair] = set()
        self.metrics: Counter = Counter()
        self.trace: list[tuple] = []
        for n in range(nodes):
            self.register_node(n)

    # -- topology -----------------------------------------------------------

    def register_node(self, node: int) -> None:
        with self._lock:
            self._nodes.add(node)

    def create_hca(self, node: int) -> HcaState:
        with self._lock:
            if node not in self._nodes:
                raise FabricError(f"node {node} is not registered with the fabric")
            if node in self._hcas:
                raise FabricError(f"node {node} already has an HCA")
            used = {h.lid for h in self._hcas.values()}
            lid = max(used, default=0) + 1
            if lid > MAX_LID:
                raise FabricError("LID space exhausted")
            hca = HcaState(node=node, lid=lid, next_qpn=self._qpn_base(), generation=self.generation)
            self._hcas[node] = hca
            return hca

    def hca(self, node: int) -> HcaState:
        return self._hcas[node]

    def _qpn_base(self) -> int:
        if self.generation == 0 or self._identity:
            return FIRST_QPN
        return self._rng.randrange(FIRST_QPN, 1 << 23)

    _identity = False

    def create_qp(self, hca: HcaState, mode: QpMode | str) -> QueuePair:
        mode = QpMode(mode)
        with self._lock:
            self._check_hca(hca)
            qpn = hca.next_qpn
            if qpn > QPN_MASK:
                raise FabricError("QPN space exhausted")
            hca.next_qpn += 1
            qp = QueuePair(hca, qpn, mode, self.generation, self.config.queue_capacity)
            self._qps[qp.address] = qp
            return qp

    def destroy_qp(self, qp: QueuePair) -> None:
        with self._lock:
            if qp.destroyed:
                return
            qp.destroyed = True
            self._purge_qp(qp)
            self._qps.pop(qp.address, None)

    def rc_connect(self, a: QueuePair, b: QueuePair) -> tuple[RealAddress, RealAddress]:
        with self._lock:
            for qp in (a, b):
                self._check_qp(qp)
                if qp.mode is not QpMode.RC:
                    raise FabricError(f"rc_connect needs RC queue pairs, got {qp.mode.value}")
                if qp.peer is not None:
                    raise FabricError(f"queue pair {qp.address} is already connected")
            if a is b:
                raise FabricError("cannot connect a queue pair to itself")
            a.peer, b.peer = b.address, a.address
            self.metrics["rc_connections"] += 1
            return a.peer, b.peer

    def lookup(self, addr: RealAddress) -> QueuePair | None:
        """Live queue pair at ``addr`` in the current generation, else None."""
        if addr.generation != self.generation:
            return None
        qp = self._qps.get(addr)
        return None if qp is None or qp.destroyed else qp

    # -- data path ----------------------------------------------------------

    def post_send(self, qp: QueuePair, dst: RealAddress | None, payload: bytes) -> int:
        payload = bytes(payload)
        if len(payload) > self.config.mtu:
            raise FabricError(f"payload of {len(payload)} bytes exceeds MTU {self.config.mtu}")
        with self._lock:
            self._check_qp(qp)
            if qp.mode is QpMode.RC:
                if dst is not None:
                    raise FabricError("RC sends take no destination")
                if qp.peer is None:
                    raise FabricError("RC send on an unconnected queue pair")
                dst = qp.peer
            elif dst is None:
                raise FabricError("UD sends need a destination")
            target = self.lookup(dst)
            if target is not None and target.depth >= target.capacity and qp.mode is QpMode.RC:
                raise QueueFullError(f"receive queue of {dst} is full")
            seq = next(self._seq)
            self.metrics["sent"] += 1
            if target is None or target.mode is not qp.mode:
                self.metrics["blackholed"] += 1
                self._record("blackhole", seq, qp.address, dst)
                return seq
            if qp.mode is QpMode.UD and self.config.ud_drop_rate > 0:
                if self._rng.random() < self.config.ud_drop_rate:
                    self.metrics["dropped"] += 1
                    self._record("drop", seq, qp.address, dst)
                    return seq
            if target.depth >= target.capacity:
                self.metrics["dropped"] += 1
                self._record("overflow", seq, qp.address, dst)
                return seq
            deliver_at = self.clock.now() + self._latency()
            if qp.mode is QpMode.RC:
                deliver_at = max(deliver_at, qp._last_rc_deliver)
                qp._last_rc_deliver = deliver_at
            dgram = Datagram(qp.address, dst, payload, deliver_at, seq, qp.mode)
            heapq.heappush(target._pending, (deliver_at, seq, dgram))
            self._busy.add(target)
            self.metrics["in_flight"] += 1
            return seq

    def _latency(self) -> float:
        lo, hi = self.config.latency_min, self.config.latency_max
        if self.config.clock_mode is ClockMode.VIRTUAL:
            return self._rng.randint(int(lo), int(hi))
        return self._rng.uniform(lo, hi)

    def poll_recv(self, qp: QueuePair, max: int = 64) -> list[Datagram]:
        with self._lock:
            pending = qp._pending
            if not pending:
                return []
            now = self.clock.now()
            out = []
            while pending and len(out) < max and pending[0][0] <= now:
                out.append(heapq.heappop(pending)[2])
            if out:
                n = len(out)
                self.metrics["delivered"] += n
                self.metrics["in_flight"] -= n
                if self.config.record_trace:
                    for d in out:
                        self.trace.append(("deliver", now, d.seq, d.src, d.dst, d.payload))
            if not pending:
                self._busy.discard(qp)
            return out

    def next_delivery_time(self) -> float | None:
        with self._lock:
            heads = [qp._pending[0][0] for qp in self._busy if qp._pending]
            return min(heads) if heads else None

    def in_flight(self) -> int:
        return self.metrics["in_flight"]

    def conservation_holds(self) -> bool:
        m = self.metrics
        return m["sent"] == (m["delivered"] + m["dropped"] + m["blackholed"]
                             + m["purged"] + m["in_flight"])

    # -- restart ------------------------------------------------------------

    def purge(self) -> int:
        """Discard everything in flight, as when every process dies at once."""
        with self._lock:
            n = 0
            for qp in list(self._busy):
                n += self._purge_qp(qp)
            return n

    def _purge_qp(self, qp: QueuePair) -> int:
        n = len(qp._pending)
        if n:
            self.metrics["purged"] += n
            self.metrics["in_flight"] -= n
            qp._pending.clear()
        self._busy.discard(qp)
        return n

    def reassign_identifiers(self, identity: bool = False) -> int:
        """Start a new generation with fresh LIDs and QPN bases.

        ``identity`` keeps every numeric LID and QPN base unchanged (a test
        hook for the case where values repeat across generations).
        """
        with self._lock:
            if self.metrics["in_flight"]:
                raise NotQuiescedError(
                    f"{self.metrics['in_flight']} datagrams still in flight"
                )
            for qp in self._qps.values():
                qp.destroyed = True
            self._qps.clear()
            self._busy.clear()
            self.generation += 1
            self._identity = identity
            hcas = sorted(self._hcas.values(), key=lambda h: h.node)
            if identity:
                lids = [h.lid for h in hcas]
            else:
                order = list(range(len(hcas)))
                self._rng.shuffle(order)
                offset = self._rng.randrange(0, MAX_LID - len(hcas) + 1)
                lids = [1 + offset + i for i in order]
            for hca, lid in zip(hcas, lids):
                hca.lid = lid
                hca.generation = self.generation
                hca.next_qpn = self._qpn_base()
                hca.qpn_base = hca.next_qpn
            self._record("reassign", self.generation)
            return self.generation

    # -- checks -------------------------------------------------------------

    def _check_hca(self, hca: HcaState) -> None:
        if hca.generation != self.generation or self._hcas.get(hca.node) is not hca:
            raise StaleGenerationError(
                f"HCA of node {hca.node} is from generation {hca.generation}, "
                f"fabric is at {self.generation}"
            )

    def _check_qp(self, qp: QueuePair) -> None:
        if qp.generation != self.generation or qp.destroyed:
            raise StaleGenerationError(f"queue pair {qp.address} is not live")

    def _record(self, *event) -> None:
        if self.config.record_trace:
            self.trace.append(event)
