"""Root and sub-coordinator logic, independent of any transport.

Both classes consume decoded messages and return the messages to send as
``(destination, message)`` pairs. A transport feeds them and performs the
sends; all state changes therefore happen in the order the transport hands
in events, one at a time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from ..errors import CheckpointInProgress, CoordinatorError
from ..phase import Phase
from .kv import KvStore
from .wire import SUB_ID_FLAG, ControlMessage, MsgType, Role, aggregate

ALLOC_PREFIX = "alloc:vid:"
CLAIM_PREFIX = "vid:"

STATUS_OK = 0
STATUS_FAIL = 1

Out = list[tuple[object, ControlMessage]]


def pack_vid(vlid: int, vqpn: int) -> bytes:
    return struct.pack("<HI", vlid, vqpn)


def unpack_vid(raw: bytes) -> tuple[int, int]:
    return struct.unpack("<HI", raw)


@dataclass
class _Barrier:
    deadline: float
    entered: set[int] = field(default_factory=set)
    done: bool = False


@dataclass
class _Conn:
    role: Role | None = None
    node: int = 0
    ranks: set[int] = field(default_factory=set)


class RootCoordinator:
    """The root of the control plane.

    ``expected_participants`` sizes every barrier. Participants are ranks;
    a sub-coordinator is one session that carries the traffic of all the
    ranks on its node.
    """

    def __init__(self, expected_participants: int, barrier_timeout: float = 1_000_000):
        if expected_participants < 1:
            raise ValueError("need at least one participant")
        self.expected = expected_participants
        self.barrier_timeout = barrier_timeout
        self.kv = KvStore()
        self.conns: dict[object, _Conn] = {}
        self.participants: dict[int, object] = {}
        self.lost: set[int] = set()
        self.epoch = 0
        self._barriers: dict[tuple[str, int], _Barrier] = {}
        self._ckpt_id = 0
        self._ckpt_active: set[int] | None = None
        self.completed_checkpoints: list[int] = []
        self.received: dict[MsgType, int] = {}

    # -- sessions -----------------------------------------------------------

    def connect(self, conn) -> None:
        self.conns[conn] = _Conn()

    @property
    def session_count(self) -> int:
        return sum(1 for c in self.conns.values() if c.role is not None)

    def disconnect(self, conn, now: float) -> Out:
        info = self.conns.pop(conn, None)
        if info is None:
            return []
        out: Out = []
        for rank in sorted(info.ranks):
            out += self._depart(rank, now)
        return out

    def _depart(self, rank: int, now: float) -> Out:
        if self.participants.pop(rank, None) is None:
            return []
        self.lost.add(rank)
        for info in self.conns.values():
            info.ranks.discard(rank)
        out: Out = []
        for key, b in sorted(self._barriers.items()):
            if not b.done:
                out += self._abort(key, f"rank {rank} departed")
        if self._ckpt_active is not None:
            self._ckpt_active = None
        if not self.participants:
            # everyone is gone: the next registrations start a new incarnation
            self._barriers.clear()
            self.lost.clear()
            self.epoch += 1
        return out

    # -- events -------------------------------------------------------------

    def handle(self, conn, msg: ControlMessage, now: float) -> Out:
        self.received[msg.type] = self.received.get(msg.type, 0) + 1
        if conn not in self.conns:
            self.conns[conn] = _Conn()
        t = msg.type
        if t is MsgType.AGGREGATE:
            out: Out = []
            for inner in msg.inner:
                out += self.handle(conn, inner, now)
            return out
        if t is MsgType.REGISTER:
            return self._register(conn, msg)
        if t is MsgType.BARRIER_ENTER:
            return self._enter(conn, msg, now)
        if t is MsgType.PUBLISH:
            self.kv.publish(msg.key, msg.value, msg.generation)
            return []
        if t is MsgType.QUERY:
            return [(conn, self._query(msg))]
        if t is MsgType.PHASE_ACK:
            return self._phase_ack(msg)
        if t is MsgType.SHUTDOWN:
            if msg.sender & SUB_ID_FLAG:
                return self.disconnect(conn, now)
            return self._depart(msg.sender, now)
        raise CoordinatorError(f"root cannot handle {t.name}")

    def _register(self, conn, msg: ControlMessage) -> Out:
        info = self.conns[conn]
        if msg.role == Role.SUB:
            info.role, info.node = Role.SUB, msg.node
            return [(conn, ControlMessage(MsgType.REGISTER_ACK, sender=msg.sender))]

        def reject(reason: str) -> Out:
            return [(conn, ControlMessage(MsgType.REGISTER_ACK, sender=msg.sender,
                                          status=STATUS_FAIL, reason=reason))]

        if msg.sender in self.participants:
            return reject(f"rank {msg.sender} is already registered")
        if len(self.participants) >= self.expected:
            return reject(f"coordinator is sized for {self.expected} participants")
        if info.role is None:
            info.role, info.node = Role.RANK, msg.node
        info.ranks.add(msg.sender)
        self.participants[msg.sender] = conn
        return [(conn, ControlMessage(MsgType.REGISTER_ACK, sender=msg.sender))]

    def _enter(self, conn, msg: ControlMessage, now: float) -> Out:
        key = (msg.name, msg.seq)
        b = self._barriers.get(key)
        if b is None:
            b = self._barriers[key] = _Barrier(deadline=now + self.barrier_timeout)
        if b.done:
            # entering a barrier that already aborted
            return [(conn, ControlMessage(MsgType.BARRIER_RELEASE, sender=msg.sender,
                                          name=msg.name, seq=msg.seq, status=STATUS_FAIL))]
        if msg.sender not in self.participants or self.lost:
            # a participant is gone for good, so this barrier can never fill
            b.done = bool(self.lost)
            return [(conn, ControlMessage(MsgType.BARRIER_RELEASE, sender=msg.sender,
                                          name=msg.name, seq=msg.seq, status=STATUS_FAIL))]
        b.entered.add(msg.sender)
        if len(b.entered) < self.expected:
            return []
        b.done = True
        return [
            (self.participants[r], ControlMessage(MsgType.BARRIER_RELEASE, sender=r,
                                                  name=msg.name, seq=msg.seq))
            for r in sorted(self.participants)
        ]

    def _abort(self, key: tuple[str, int], reason: str) -> Out:
        b = self._barriers[key]
        b.done = True
        name, seq = key
        return [
            (self.participants[r], ControlMessage(MsgType.BARRIER_RELEASE, sender=r, name=name,
                                                  seq=seq, status=STATUS_FAIL))
            for r in sorted(self.participants)
        ]

    def next_deadline(self) -> float | None:
        pending = [b.deadline for b in self._barriers.values() if not b.done]
        return min(pending) if pending else None

    def check_timeouts(self, now: float) -> Out:
        out: Out = []
        for key, b in sorted(self._barriers.items()):
            if not b.done and b.deadline <= now:
                out += self._abort(key, "timeout")
        return out

    def _query(self, msg: ControlMessage) -> ControlMessage:
        if msg.key.startswith(ALLOC_PREFIX):
            vlid, vqpn = self._allocate_vid(msg.key[len(ALLOC_PREFIX):])
            return ControlMessage(MsgType.QUERY_REPLY, sender=msg.sender,
                                  request_id=msg.request_id, status=1,
                                  value=pack_vid(vlid, vqpn))
        entry = self.kv.query(msg.key)
        if entry is None:
            return ControlMessage(MsgType.QUERY_REPLY, sender=msg.sender,
                                  request_id=msg.request_id, status=0)
        return ControlMessage(MsgType.QUERY_REPLY, sender=msg.sender, request_id=msg.request_id,
                              status=1, value=entry.value, generation=entry.generation)

    def _allocate_vid(self, requested: str) -> tuple[int, int]:
        lid_s, qpn_s = requested.split(":")
        vlid, vqpn = int(lid_s), int(qpn_s)
        while f"{CLAIM_PREFIX}{vlid}:{vqpn}" in self.kv:
            vqpn += 1
            if vqpn >= 1 << 24:
                vlid, vqpn = (vlid + 1) & 0xFFFF, 2
        self.kv.publish(f"{CLAIM_PREFIX}{vlid}:{vqpn}", b"\x01")
        return vlid, vqpn

    # -- checkpoints --------------------------------------------------------

    @property
    def checkpoint_active(self) -> bool:
        return self._ckpt_active is not None

    def request_checkpoint(self) -> tuple[int, Out]:
        """Send one CKPT_REQUEST to every participant.

        A sub-coordinator receives the requests for all its ranks packed
        into a single AGGREGATE frame.
        """
        if self._ckpt_active is not None:
            raise CheckpointInProgress(f"checkpoint {self._ckpt_id} is still running")
        if len(self.participants) < self.expected:
            raise CoordinatorError(
                f"only {len(self.participants)} of {self.expected} participants registered"
            )
        self._ckpt_id += 1
        self._ckpt_active = set(self.participants)
        by_conn: dict[object, list[ControlMessage]] = {}
        for r in sorted(self.participants):
            by_conn.setdefault(self.participants[r], []).append(
                ControlMessage(MsgType.CKPT_REQUEST, sender=r, ckpt_id=self._ckpt_id))
        out: Out = []
        for conn, msgs in by_conn.items():
            if self.conns[conn].role == Role.SUB:
                out.append((conn, aggregate(SUB_ID_FLAG | self.conns[conn].node, msgs)))
            else:
                out += [(conn, m) for m in msgs]
        return self._ckpt_id, out

    def _phase_ack(self, msg: ControlMessage) -> Out:
        if (self._ckpt_active is not None and msg.ckpt_id == self._ckpt_id
                and msg.phase == Phase.RUNNING):
            self._ckpt_active.discard(msg.sender)
            if not self._ckpt_active:
                self._ckpt_active = None
                self.completed_checkpoints.append(self._ckpt_id)
        return []


class SubCoordinator:
    """Per-node relay between local ranks and the root.

    Barrier entries and phase acknowledgements from the node's ranks are
    held until every local rank has sent its own, then forwarded as one
    AGGREGATE frame. Everything else passes through one message at a time.
    """

    UP = "root"

    def __init__(self, node: int, local_ranks: int):
        self.node = node
        self.sub_id = SUB_ID_FLAG | node
        self.local_ranks = local_ranks
        self.ranks: dict[int, object] = {}
        self._pending: dict[tuple, list[ControlMessage]] = {}
        self.departed = 0
        self.aggregates_sent = 0
        self.root_alive = True

    def register_message(self) -> ControlMessage:
        return ControlMessage(MsgType.REGISTER, sender=self.sub_id, role=Role.SUB, node=self.node)

    def from_rank(self, conn, msg: ControlMessage) -> Out:
        t = msg.type
        if t is MsgType.REGISTER:
            self.ranks[msg.sender] = conn
            return [(self.UP, msg)]
        if t is MsgType.BARRIER_ENTER:
            return self._collect(("barrier", msg.name, msg.seq), msg)
        if t is MsgType.PHASE_ACK:
            return self._collect(("phase", msg.ckpt_id, msg.phase), msg)
        return [(self.UP, msg)]

    def _collect(self, key: tuple, msg: ControlMessage) -> Out:
        self._pending.setdefault(key, []).append(msg)
        return self._flush(key)

    def _flush(self, key: tuple) -> Out:
        group = self._pending[key]
        if len(group) < self.local_ranks - self.departed:
            return []
        del self._pending[key]
        self.aggregates_sent += 1
        return [(self.UP, aggregate(self.sub_id, group))]

    def from_root(self, msg: ControlMessage) -> Out:
        if msg.type is MsgType.AGGREGATE:
            out: Out = []
            for inner in msg.inner:
                out += self.from_root(inner)
            return out
        conn = self.ranks.get(msg.sender)
        return [] if conn is None else [(conn, msg)]

    def rank_disconnect(self, conn) -> Out:
        gone = [r for r, c in self.ranks.items() if c == conn]
        for r in gone:
            del self.ranks[r]
        out: Out = [(self.UP, ControlMessage(MsgType.SHUTDOWN, sender=r)) for r in gone]
        if not self.ranks:
            # the node is empty; whoever registers next starts from scratch
            self._pending.clear()
            self.departed = 0
            return out
        self.departed += len(gone)
        # groups that were only waiting for the departed ranks go up now,
        # so the root can fail the barrier instead of timing out
        for key in list(self._pending):
            out += self._flush(key)
        return out

    def root_disconnect(self) -> Out:
        self.root_alive = False
        return [(conn, ControlMessage(MsgType.SHUTDOWN, sender=r))
                for r, conn in sorted(self.ranks.items())]
