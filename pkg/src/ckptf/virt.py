"""Virtual UD endpoint identities and shadow address handles.

Application code names a UD endpoint by a ``VirtualEndpointId`` that never
changes, and addresses peers through opaque shadow-handle ids. The real
(LID, QPN) behind either is looked up through the coordinator and patched
in just before the send reaches the fabric.
"""

from __future__ import annotations

import itertools
import struct
import threading
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

from .errors import ResolveError
from .fabric import Fabric, HcaState, QpMode, QueuePair, RealAddress

KV_PREFIX = "ud"


class ResolvePolicy(str, Enum):
    PER_SEND = "per_send"
    GENERATION_CACHED = "generation_cached"


class VirtualEndpointId(NamedTuple):
    vlid: int
    vqpn: int


def kv_key(vid: VirtualEndpointId) -> str:
    return f"{KV_PREFIX}:{vid.vlid}:{vid.vqpn}"


def pack_real(addr: RealAddress) -> bytes:
    """lid:16 | qpn:24 | generation:24, little-endian in 8 bytes."""
    if not (0 <= addr.lid < 1 << 16 and 0 <= addr.qpn < 1 << 24 and 0 <= addr.generation < 1 << 24):
        raise ValueError(f"address out of range: {addr}")
    return struct.pack("<Q", addr.lid | addr.qpn << 16 | addr.generation << 40)


def unpack_real(raw: bytes) -> RealAddress:
    (v,) = struct.unpack("<Q", raw)
    return RealAddress(v & 0xFFFF, (v >> 16) & 0xFFFFFF, (v >> 40) & 0xFFFFFF)


class TranslationTable:
    """Virtual id -> last known real address, plus the ids this rank owns."""

    def __init__(self):
        self.entries: dict[VirtualEndpointId, RealAddress] = {}
        self.local_owned: set[VirtualEndpointId] = set()
        self._lock = threading.Lock()

    def put(self, vid: VirtualEndpointId, addr: RealAddress, owned: bool = False) -> None:
        with self._lock:
            self.entries[vid] = addr
            if owned:
                self.local_owned.add(vid)

    def current(self, vid: VirtualEndpointId, generation: int) -> RealAddress | None:
        addr = self.entries.get(vid)
        return addr if addr is not None and addr.generation == generation else None

    def snapshot(self) -> list[tuple[VirtualEndpointId, RealAddress, bool]]:
        with self._lock:
            return [(v, a, v in self.local_owned) for v, a in sorted(self.entries.items())]

    @classmethod
    def from_snapshot(cls, rows) -> "TranslationTable":
        table = cls()
        for vid, addr, owned in rows:
            table.put(VirtualEndpointId(*vid), RealAddress(*addr), owned)
        return table


@dataclass
class ShadowAddressHandle:
    handle_id: int
    target: VirtualEndpointId
    real_ah: RealAddress | None = None
    generation: int = -1


class UdVirtualizer:
    """Per-rank UD virtualization layer.

    ``session`` is the rank's coordinator session. ``sleep`` is called
    between resolve retries; it defaults to the fabric clock's sleep.
    """

    def __init__(self, fabric: Fabric, hca: HcaState, session,
                 policy: ResolvePolicy = ResolvePolicy.PER_SEND, max_attempts: int = 10,
                 retry_base: float = 1, sleep=None, table: TranslationTable | None = None):
        self.fabric = fabric
        self.hca = hca
        self.session = session
        self.policy = ResolvePolicy(policy)
        self.max_attempts = max_attempts
        self.retry_base = retry_base
        self.sleep = sleep or fabric.clock.sleep
        self.table = table or TranslationTable()
        self._qps: dict[VirtualEndpointId, QueuePair] = {}
        self._handles: dict[int, ShadowAddressHandle] = {}
        self._handle_ids = itertools.count(1)
        self.queries = 0
        self.resolves = 0
        self.rebuilds = 0

    # -- local endpoints ------------------------------------------------------

    def create_qp(self) -> VirtualEndpointId:
        return self.register_local_qp(self.fabric.create_qp(self.hca, QpMode.UD))

    def register_local_qp(self, qp: QueuePair, vid: VirtualEndpointId | None = None
                          ) -> VirtualEndpointId:
        """Bind ``qp`` to a virtual id and publish the binding.

        A fresh id is requested from the coordinator, which hands out the
        real (LID, QPN) itself unless another endpoint already holds it.
        """
        if qp.mode is not QpMode.UD:
            raise ValueError("only UD queue pairs are virtualized")
        addr = qp.address
        if vid is None:
            vid = VirtualEndpointId(*self.session.allocate_vid(addr.lid, addr.qpn))
        self._qps[vid] = qp
        self.table.put(vid, addr, owned=True)
        self.session.publish(kv_key(vid), pack_real(addr), addr.generation)
        return vid

    def qp_for(self, vid: VirtualEndpointId) -> QueuePair:
        return self._qps[vid]

    @property
    def owned(self) -> list[VirtualEndpointId]:
        return sorted(self.table.local_owned)

    def refresh_after_restart(self) -> int:
        """Recreate a real QP for every owned id and publish the new bindings."""
        n = 0
        for vid in self.owned:
            old = self._qps.get(vid)
            if old is not None:
                self.fabric.destroy_qp(old)
            self.register_local_qp(self.fabric.create_qp(self.hca, QpMode.UD), vid)
            n += 1
        for h in self._handles.values():
            h.real_ah = None
        return n

    # -- shadow handles ---------------------------------------------------------

    def vcreate_ah(self, target: VirtualEndpointId) -> int:
        h = ShadowAddressHandle(next(self._handle_ids), VirtualEndpointId(*target))
        self._handles[h.handle_id] = h
        return h.handle_id

    def destroy_ah(self, handle_id: int) -> None:
        del self._handles[handle_id]

    def handle(self, handle_id: int) -> ShadowAddressHandle:
        return self._handles[handle_id]

    def handle_ids(self) -> list[int]:
        return sorted(self._handles)

    def restore_handle(self, handle_id: int, target: VirtualEndpointId) -> None:
        """Recreate a handle under its old id; the real address is rebuilt on first send."""
        self._handles[handle_id] = ShadowAddressHandle(handle_id, VirtualEndpointId(*target))
        nxt = max(self._handles) + 1
        self._handle_ids = itertools.count(nxt)

    # -- resolution -------------------------------------------------------------

    def resolve(self, target: VirtualEndpointId) -> RealAddress:
        """Real address of ``target`` in the current generation, retrying while
        the peer has not yet published."""
        target = VirtualEndpointId(*target)
        delay = self.retry_base
        for attempt in range(self.max_attempts):
            try:
                return self._resolve_once(target)
            except ResolveError:
                if attempt == self.max_attempts - 1:
                    raise
                self.sleep(delay)
                delay *= 2
        raise AssertionError("unreachable")

    def _resolve_once(self, target: VirtualEndpointId) -> RealAddress:
        self.resolves += 1
        gen = self.fabric.generation
        if target in self.table.local_owned:
            addr = self.table.current(target, gen)
            if addr is not None:
                return addr
        self.queries += 1
        entry = self.session.query(kv_key(target))
        if entry is None:
            raise ResolveError("NOT_FOUND", target)
        addr = unpack_real(entry.value)
        if addr.generation != gen:
            raise ResolveError("STALE", target)
        self.table.put(target, addr)
        return addr

    def vsend(self, handle_id: int, src: VirtualEndpointId | QueuePair, payload: bytes) -> int:
        h = self._handles[handle_id]
        qp = src if isinstance(src, QueuePair) else self._qps[VirtualEndpointId(*src)]
        if qp.mode is not QpMode.UD:
            raise ValueError("vsend needs a UD source queue pair")
        gen = self.fabric.generation
        stale = h.real_ah is None or h.generation < gen
        if self.policy is ResolvePolicy.PER_SEND or stale:
            addr = self.resolve(h.target)
            if stale or addr != h.real_ah:
                self.rebuilds += 1
            h.real_ah, h.generation = addr, gen
        return self.fabric.post_send(qp, h.real_ah, payload)
