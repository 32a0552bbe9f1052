"""Deterministic workloads and their sequential reference.

Every workload is a per-iteration sequence of rounds. In a round a rank
sends its running value to some peers, waits for a fixed set of messages,
and folds what it received into its value. At the end of each iteration
the rank reads one of its heap regions and mixes a digest of it in, so
the result depends on memory contents as well as on communication.
"""

from __future__ import annotations

import hashlib
import random
import struct
from dataclasses import asdict, dataclass
from enum import Enum

MASK64 = (1 << 64) - 1

# message kinds
KIND_LEFTWARD = 0   # sent to the left neighbour (ring uses it for its only message)
KIND_RIGHTWARD = 1
KIND_UD = 2
KIND_REDUCE = 3


class WorkloadKind(str, Enum):
    RING = "ring"
    STENCIL = "stencil"
    ALLREDUCE = "allreduce"


@dataclass(frozen=True)
class WorkloadSpec:
    kind: WorkloadKind
    ranks: int
    nodes: int = 1
    iterations: int = 10
    payload_bytes: int = 64
    seed: int = 0
    heap_regions: int = 2
    heap_bytes: int = 256
    ud_every: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", WorkloadKind(self.kind))
        if self.ranks < 1 or self.nodes < 1:
            raise ValueError("ranks and nodes must be >= 1")
        if self.ranks % self.nodes:
            raise ValueError(f"{self.ranks} ranks do not divide over {self.nodes} nodes")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.heap_regions < 1 or self.heap_bytes < 0 or self.ud_every < 1:
            raise ValueError("bad heap or UD settings")

    @property
    def ranks_per_node(self) -> int:
        return self.ranks // self.nodes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


@dataclass(frozen=True)
class Send:
    dest: int
    kind: int
    ud: bool = False


@dataclass(frozen=True)
class Recv:
    src: int
    kind: int
    ud: bool = False


@dataclass(frozen=True)
class Round:
    sends: tuple[Send, ...]
    recvs: tuple[Recv, ...]
    op: str  # "mix", "add" or "set"


def mix(*words: int) -> int:
    """Splitmix64-style fold of 64-bit words."""
    h = 0x9E3779B97F4A7C15
    for w in words:
        h = (h ^ (w & MASK64)) & MASK64
        h = (h + 0x9E3779B97F4A7C15) & MASK64
        h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & MASK64
        h ^= h >> 31
    return h


def initial_value(spec: WorkloadSpec, rank: int) -> int:
    return mix(spec.seed, rank, 0x5EED)


def heap_region(spec: WorkloadSpec, rank: int, k: int) -> bytes:
    return random.Random(mix(spec.seed, rank, k, 0x4EA9)).randbytes(spec.heap_bytes)


def region_digest(data) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def heap_index(spec: WorkloadSpec, iteration: int) -> int:
    return iteration % spec.heap_regions


def ud_partner(rank: int, n: int) -> int:
    return (rank + n // 2) % n


def ud_source(rank: int, n: int) -> int:
    return (rank - n // 2) % n


def _pow2_floor(n: int) -> int:
    p = 1
    while p * 2 <= n:
        p *= 2
    return p


def rounds(spec: WorkloadSpec, rank: int, iteration: int) -> list[Round]:
    n = spec.ranks
    if spec.kind is WorkloadKind.RING:
        if n == 1:
            return [Round((), (), "mix")]
        return [Round((Send((rank + 1) % n, KIND_LEFTWARD),),
                      (Recv((rank - 1) % n, KIND_LEFTWARD),), "mix")]
    if spec.kind is WorkloadKind.STENCIL:
        if n == 1:
            return [Round((), (), "mix")]
        left, right = (rank - 1) % n, (rank + 1) % n
        sends = [Send(left, KIND_LEFTWARD), Send(right, KIND_RIGHTWARD)]
        recvs = [Recv(right, KIND_LEFTWARD), Recv(left, KIND_RIGHTWARD)]
        if iteration % spec.ud_every == 0:
            sends.append(Send(ud_partner(rank, n), KIND_UD, ud=True))
            recvs.append(Recv(ud_source(rank, n), KIND_UD, ud=True))
        return [Round(tuple(sends), tuple(recvs), "mix")]
    # recursive doubling, folding the ranks beyond the largest power of two
    p = _pow2_floor(n)
    extra = n - p
    out = []
    if rank >= p:
        out.append(Round((Send(rank - p, KIND_REDUCE),), (), "add"))
    elif rank < extra:
        out.append(Round((), (Recv(rank + p, KIND_REDUCE),), "add"))
    else:
        out.append(Round((), (), "add"))
    bit = 1
    while bit < p:
        if rank < p:
            out.append(Round((Send(rank ^ bit, KIND_REDUCE),), (Recv(rank ^ bit, KIND_REDUCE),), "add"))
        else:
            out.append(Round((), (), "add"))
        bit *= 2
    if rank < extra:
        out.append(Round((Send(rank + p, KIND_REDUCE),), (), "add"))
    elif rank >= p:
        out.append(Round((), (Recv(rank - p, KIND_REDUCE),), "set"))
    else:
        out.append(Round((), (), "add"))
    return out


def rc_peers(spec: WorkloadSpec, rank: int) -> list[int]:
    peers = set()
    for it in range(min(spec.iterations, spec.ud_every)):
        for rnd in rounds(spec, rank, it):
            peers.update(s.dest for s in rnd.sends if not s.ud)
            peers.update(r.src for r in rnd.recvs if not r.ud)
    peers.discard(rank)
    return sorted(peers)


def uses_ud(spec: WorkloadSpec) -> bool:
    return spec.kind is WorkloadKind.STENCIL and spec.ranks > 1


def start_of_iteration(spec: WorkloadSpec, rank: int, value: int, iteration: int) -> int:
    if spec.kind is WorkloadKind.ALLREDUCE:
        return mix(value, rank, iteration)
    return value


def combine(op: str, acc: int, received: list[int], iteration: int) -> int:
    if op == "mix":
        return mix(acc, *received, iteration)
    if op == "add":
        return (acc + sum(received)) & MASK64
    if op == "set":
        return received[0]
    raise ValueError(op)


def end_of_iteration(value: int, heap_digest: int) -> int:
    return mix(value, heap_digest)


def rank_digest(rank: int, iteration: int, value: int) -> bytes:
    return hashlib.blake2b(struct.pack("<IIQ", rank, iteration, value), digest_size=8).digest()


def fold_checksum(digests) -> int:
    """Order-insensitive reduction over per-rank digests."""
    h = hashlib.blake2b(digest_size=8)
    for d in sorted(digests):
        h.update(d)
    return int.from_bytes(h.digest(), "little")


def reference_checksum(spec: WorkloadSpec) -> int:
    """Single-threaded simulation of the same arithmetic with no fabric at all."""
    n = spec.ranks
    values = [initial_value(spec, r) for r in range(n)]
    digests = [[region_digest(heap_region(spec, r, k)) for k in range(spec.heap_regions)]
               for r in range(n)]
    for it in range(spec.iterations):
        plans = [rounds(spec, r, it) for r in range(n)]
        acc = [start_of_iteration(spec, r, values[r], it) for r in range(n)]
        for k in range(len(plans[0])):
            # every message of round k carries the sender's value at the start of round k
            outbox = {}
            for r in range(n):
                for s in plans[r][k].sends:
                    outbox[(s.dest, r, s.kind)] = acc[r]
            acc = [combine(plans[r][k].op, acc[r],
                           [outbox[(r, m.src, m.kind)] for m in plans[r][k].recvs], it)
                   for r in range(n)]
        values = [end_of_iteration(acc[r], digests[r][heap_index(spec, it)]) for r in range(n)]
    return fold_checksum(rank_digest(r, spec.iterations, values[r]) for r in range(n))
