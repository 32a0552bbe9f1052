"""One rank of a workload: a resumable state machine over RC and UD endpoints."""

from __future__ import annotations

import json
import struct
from collections import Counter

from ..ckpt.image import MODE_UD
from . import workloads as wl
from .workloads import WorkloadSpec

_HEADER = struct.Struct("<IIIIQ")  # src, iteration, round, kind, value
_TARGET = struct.Struct("<HI")     # intended virtual endpoint of a UD message
STATE_REGION = "app.state"


def heap_tag(k: int) -> str:
    return f"heap.{k:04d}"


def encode_message(src: int, iteration: int, rnd: int, kind: int, value: int,
                   size: int, target=None) -> bytes:
    body = _HEADER.pack(src, iteration, rnd, kind, value)
    if target is not None:
        body += _TARGET.pack(*target)
    return body.ljust(size, b"\0")


def decode_message(payload: bytes, ud: bool):
    src, iteration, rnd, kind, value = _HEADER.unpack_from(payload)
    target = _TARGET.unpack_from(payload, _HEADER.size) if ud else None
    return src, iteration, rnd, kind, value, target


class Pause:
    """Where a rank should stop and wait: before or after its sends of a round."""

    def __init__(self, iteration: int, rnd: int = 0, after_sends: bool = False):
        self.iteration = iteration
        self.round = rnd
        self.after_sends = after_sends

    @property
    def position(self) -> tuple[int, int, int]:
        return (self.iteration, self.round, int(self.after_sends))

    def reached(self, app: "RankApp") -> bool:
        return app.done or app.position >= self.position


class RankApp:
    """Application state of one rank.

    Everything needed to continue the computation lives in ``regions()``:
    the small JSON state record and the heap regions. Peers are reached
    through the agent's RC queue pairs and through shadow-handle ids for UD;
    the application never sees a real fabric address.
    """

    def __init__(self, spec: WorkloadSpec, rank: int):
        self.spec = spec
        self.rank = rank
        self.iteration = 0
        self.round = 0
        self.sent = False
        self.value = wl.initial_value(spec, rank)
        self.acc = wl.start_of_iteration(spec, rank, self.value, 0)
        self.inbox: dict[tuple[int, int, int, int], int] = {}
        self.ud_handles: dict[int, int] = {}  # peer rank -> shadow handle id
        self.heap = {heap_tag(k): None for k in range(spec.heap_regions)}
        self._heap_source = None
        self.agent = None
        self.counters = Counter()
        self.ud_trace: list[tuple] = []

    # -- wiring -----------------------------------------------------------------

    def bind(self, agent) -> None:
        self.agent = agent

    def connect_ud(self) -> None:
        """Create shadow handles for every UD peer this rank ever sends to."""
        if not wl.uses_ud(self.spec):
            return
        peer = wl.ud_partner(self.rank, self.spec.ranks)
        if peer != self.rank and peer not in self.ud_handles:
            vid = self.agent.lookup_rank_vid(peer)
            self.ud_handles[peer] = self.agent.virt.vcreate_ah(vid)

    @property
    def done(self) -> bool:
        return self.iteration >= self.spec.iterations

    @property
    def position(self) -> tuple[int, int, int]:
        return (self.iteration, self.round, int(self.sent))

    # -- memory -----------------------------------------------------------------

    def heap_bytes(self, tag: str) -> bytes:
        data = self.heap[tag]
        if data is None:
            if self._heap_source is not None:
                data = self._heap_source[tag]
            else:
                data = wl.heap_region(self.spec, self.rank, int(tag.split(".")[1]))
            self.heap[tag] = data
        return data

    def regions(self) -> dict[str, bytes]:
        out = {STATE_REGION: self._state_record()}
        for tag in self.heap:
            out[tag] = self.heap_bytes(tag)
        return out

    def _state_record(self) -> bytes:
        return json.dumps({
            "spec": self.spec.to_dict(), "rank": self.rank, "iteration": self.iteration,
            "round": self.round, "sent": self.sent, "value": self.value, "acc": self.acc,
            "inbox": sorted([*k, v] for k, v in self.inbox.items()),
            "ud_handles": sorted([p, h] for p, h in self.ud_handles.items()),
        }, sort_keys=True).encode()

    def restore(self, regions) -> None:
        rec = json.loads(bytes(regions[STATE_REGION]))
        if rec["spec"] != self.spec.to_dict() or rec["rank"] != self.rank:
            raise ValueError("image was written by a different workload or rank")
        self.iteration, self.round, self.sent = rec["iteration"], rec["round"], rec["sent"]
        self.value, self.acc = rec["value"], rec["acc"]
        self.inbox = {tuple(e[:4]): e[4] for e in rec["inbox"]}
        self.ud_handles = {p: h for p, h in rec["ud_handles"]}
        # heap regions are read from the image only when the workload touches them
        self._heap_source = regions
        self.heap = {tag: None for tag in regions if tag.startswith("heap.")}

    # -- messaging --------------------------------------------------------------

    def deliver(self, mode: int, payload: bytes) -> None:
        ud = mode == MODE_UD
        src, iteration, rnd, kind, value, target = decode_message(payload, ud)
        if ud:
            self.counters["ud_received"] += 1
            if tuple(target) != tuple(self.agent.ud_vid):
                self.counters["misdelivered"] += 1
                return
            self.ud_trace.append((src, iteration, rnd, kind, value))
        key = (iteration, rnd, src, kind)
        if key in self.inbox:
            self.counters["duplicates"] += 1
        self.inbox[key] = value

    def poll(self) -> int:
        n = 0
        for mode, qp in self.agent.queues():
            while True:
                batch = self.agent.fabric.poll_recv(qp, 256)
                if not batch:
                    break
                for d in batch:
                    self.deliver(mode, d.payload)
                n += len(batch)
        return n

    def _send(self, s: wl.Send) -> None:
        payload_size = self.spec.payload_bytes
        if s.ud:
            handle = self.ud_handles[s.dest]
            target = self.agent.virt.handle(handle).target
            msg = encode_message(self.rank, self.iteration, self.round, s.kind, self.acc,
                                 payload_size, target)
            self.agent.virt.vsend(handle, self.agent.ud_vid, msg)
            self.counters["ud_sent"] += 1
        else:
            msg = encode_message(self.rank, self.iteration, self.round, s.kind, self.acc,
                                 payload_size)
            self.agent.fabric.post_send(self.agent.rc[s.dest], None, msg)
            self.counters["rc_sent"] += 1

    # -- stepping ---------------------------------------------------------------

    def step(self, pause: Pause | None = None) -> bool:
        """Make as much progress as possible without blocking. True if anything changed."""
        progressed = self.poll() > 0
        while not self.done:
            if pause is not None and pause.reached(self):
                break
            plan = wl.rounds(self.spec, self.rank, self.iteration)[self.round]
            if not self.sent:
                for s in plan.sends:
                    self._send(s)
                self.sent = True
                progressed = True
                continue
            keys = [(self.iteration, self.round, r.src, r.kind) for r in plan.recvs]
            if not all(k in self.inbox for k in keys):
                break
            received = [self.inbox.pop(k) for k in keys]
            self.acc = wl.combine(plan.op, self.acc, received, self.iteration)
            self._advance_round()
            progressed = True
        return progressed

    def _advance_round(self) -> None:
        self.sent = False
        self.round += 1
        if self.round < len(wl.rounds(self.spec, self.rank, self.iteration)):
            return
        tag = heap_tag(wl.heap_index(self.spec, self.iteration))
        self.value = wl.end_of_iteration(self.acc, wl.region_digest(self.heap_bytes(tag)))
        self.iteration += 1
        self.round = 0
        self.acc = wl.start_of_iteration(self.spec, self.rank, self.value, self.iteration)

    def digest(self) -> bytes:
        return wl.rank_digest(self.rank, self.iteration, self.value)
