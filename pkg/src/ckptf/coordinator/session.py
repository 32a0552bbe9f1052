"""A rank's connection to the control plane."""

from __future__ import annotations

import itertools
import threading
from collections import Counter, deque

from ..errors import BarrierAborted, CoordinatorError, RegistrationRejected, SessionFailed
from .core import ALLOC_PREFIX, STATUS_OK, unpack_vid
from .kv import KvEntry
from .wire import ControlMessage, MsgType, Role, decode

DEFAULT_TIMEOUT_VIRTUAL = 1_000_000  # ticks
DEFAULT_TIMEOUT_WALL = 30_000  # ms


class ThreadWaiter:
    """Blocks on a condition variable; frames arrive from a reader thread."""

    def __init__(self):
        self.cond = threading.Condition()

    def notify(self) -> None:
        with self.cond:
            self.cond.notify_all()

    def wait(self, predicate, timeout: float) -> bool:
        with self.cond:
            return self.cond.wait_for(predicate, timeout / 1000.0)


class Session:
    """Client half of the control plane for one rank.

    ``link`` needs ``send_up(frame)`` and ``close()``; incoming frames are
    handed to ``on_frame``. ``waiter`` decides how blocking calls wait:
    pumping an in-memory bus, or sleeping on a condition variable.
    """

    def __init__(self, rank: int, node: int, waiter, timeout: float):
        self.rank = rank
        self.node = node
        self.waiter = waiter
        self.timeout = timeout
        self.link = None
        self.failed = False
        self.sent = Counter()
        self.received = Counter()
        self._lock = threading.Lock()
        self._acks: deque = deque()
        self._releases: dict[tuple[str, int], int] = {}
        self._replies: dict[int, ControlMessage] = {}
        self._ckpt_requests: deque = deque()
        self._barrier_seq: Counter = Counter()
        self._req_ids = itertools.count(1)
        self.trace: list[tuple[str, str]] = []

    def attach(self, link) -> None:
        self.link = link

    # -- transport callbacks --------------------------------------------------

    def on_frame(self, frame: bytes) -> None:
        msg = decode(frame)
        with self._lock:
            self.received[msg.type.name] += 1
            t = msg.type
            if t is MsgType.REGISTER_ACK:
                self._acks.append(msg)
            elif t is MsgType.BARRIER_RELEASE:
                self._releases[(msg.name, msg.seq)] = msg.status
            elif t is MsgType.QUERY_REPLY:
                self._replies[msg.request_id] = msg
            elif t is MsgType.CKPT_REQUEST:
                self._ckpt_requests.append(msg.ckpt_id)
            elif t is MsgType.SHUTDOWN:
                self.failed = True
        self.waiter.notify()

    def on_link_closed(self, link=None) -> None:
        self.failed = True
        self.waiter.notify()

    # -- helpers --------------------------------------------------------------

    def _send(self, msg: ControlMessage) -> None:
        if self.failed or self.link is None:
            raise SessionFailed(f"rank {self.rank}: control-plane session is down")
        with self._lock:
            self.sent[msg.type.name] += 1
        try:
            self.link.send_up(msg.encode())
        except (ConnectionError, OSError) as exc:
            self.failed = True
            raise SessionFailed(str(exc)) from exc

    def _wait(self, predicate, what: str) -> None:
        ok = self.waiter.wait(lambda: predicate() or self.failed, self.timeout)
        if not ok:
            raise CoordinatorError(f"rank {self.rank}: timed out waiting for {what}")
        if self.failed and not predicate():
            raise SessionFailed(f"rank {self.rank}: session failed waiting for {what}")

    def control_messages(self) -> int:
        return sum(self.sent.values()) + sum(self.received.values())

    # -- operations -----------------------------------------------------------

    def register(self) -> None:
        self._send(ControlMessage(MsgType.REGISTER, sender=self.rank, role=Role.RANK,
                                  node=self.node))
        self._wait(lambda: bool(self._acks), "REGISTER_ACK")
        ack = self._acks.popleft()
        if ack.status != STATUS_OK:
            raise RegistrationRejected(ack.reason)

    def enter_barrier(self, name: str) -> int:
        seq = self._barrier_seq[name]
        self._barrier_seq[name] += 1
        self.trace.append(("enter", name))
        self._send(ControlMessage(MsgType.BARRIER_ENTER, sender=self.rank, name=name, seq=seq))
        return seq

    def wait_barrier(self, name: str, seq: int) -> None:
        key = (name, seq)
        try:
            self._wait(lambda: key in self._releases, f"barrier {name!r}")
        except CoordinatorError as exc:
            raise BarrierAborted(str(exc)) from exc
        status = self._releases.pop(key)
        if status != STATUS_OK:
            raise BarrierAborted(f"barrier {name!r} aborted")
        self.trace.append(("release", name))

    def barrier(self, name: str) -> None:
        self.wait_barrier(name, self.enter_barrier(name))

    def publish(self, key: str, value: bytes, generation: int = 0) -> None:
        self._send(ControlMessage(MsgType.PUBLISH, sender=self.rank, key=key, value=value,
                                  generation=generation))

    def _request(self, key: str) -> ControlMessage:
        rid = next(self._req_ids)
        self._send(ControlMessage(MsgType.QUERY, sender=self.rank, request_id=rid, key=key))
        self._wait(lambda: rid in self._replies, f"reply to {key!r}")
        return self._replies.pop(rid)

    def query(self, key: str) -> KvEntry | None:
        reply = self._request(key)
        if not reply.status:
            return None
        return KvEntry(reply.value, reply.generation, 0)

    def allocate_vid(self, lid: int, qpn: int) -> tuple[int, int]:
        return unpack_vid(self._request(f"{ALLOC_PREFIX}{lid}:{qpn}").value)

    def poll_ckpt_request(self) -> int | None:
        with self._lock:
            return self._ckpt_requests.popleft() if self._ckpt_requests else None

    def wait_ckpt_request(self) -> int:
        self._wait(lambda: bool(self._ckpt_requests), "CKPT_REQUEST")
        return self.poll_ckpt_request()

    def phase_ack(self, ckpt_id: int, phase: int) -> None:
        self._send(ControlMessage(MsgType.PHASE_ACK, sender=self.rank, ckpt_id=ckpt_id,
                                  phase=int(phase)))

    def close(self) -> None:
        if self.link is not None:
            self.link.close()
        self.failed = True
