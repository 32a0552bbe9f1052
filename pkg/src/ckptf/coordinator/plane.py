from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from ..clock import ClockMode
from ..errors import CoordinatorError
from .bus import Bus, BusRoot, BusSub, VirtualWaiter
from .core import RootCoordinator, SubCoordinator
from .session import DEFAULT_TIMEOUT_VIRTUAL, DEFAULT_TIMEOUT_WALL, Session, ThreadWaiter
from .tcp import TcpLink, TcpRoot, TcpSub, endpoint_from_env, parse_endpoint


class TopologyMode(str, Enum):
    FLAT = "flat"
    TREE = "tree"


@dataclass(frozen=True)
class Topology:
    mode: TopologyMode
    nodes: int
    ranks_per_node: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", TopologyMode(self.mode))
        if self.nodes < 1 or self.ranks_per_node < 1:
            raise ValueError("nodes and ranks_per_node must be >= 1")

    @property
    def ranks(self) -> int:
        return self.nodes * self.ranks_per_node

    def node_of(self, rank: int) -> int:
        return rank // self.ranks_per_node

    @property
    def expected_root_sessions(self) -> int:
        return self.nodes if self.mode is TopologyMode.TREE else self.ranks


def start_root(expected_participants: int, clock, barrier_timeout: float | None = None,
               host: str = "127.0.0.1", port: int = 0):
    """Start a root coordinator on an in-memory bus (VIRTUAL) or a TCP port (WALL).

    For TCP, ``CKPTF_COORD=host:port`` overrides the given address.
    """
    if clock.mode is ClockMode.VIRTUAL:
        root = RootCoordinator(expected_participants, barrier_timeout or DEFAULT_TIMEOUT_VIRTUAL)
        return BusRoot(Bus(clock), root)
    root = RootCoordinator(expected_participants, barrier_timeout or DEFAULT_TIMEOUT_WALL)
    host, port = parse_endpoint(endpoint_from_env(f"{host}:{port}"))
    return TcpRoot(root, host, port).start()


def start_sub(node: int, local_ranks: int, root):
    """Start a node's sub-coordinator and register it with ``root``."""
    sub = SubCoordinator(node, local_ranks)
    if isinstance(root, BusRoot):
        return BusSub(root.bus, sub, root)
    return TcpSub(sub, root.address).start()


class ControlPlane:
    """Root, optional sub-coordinators, and the sessions of every rank."""

    def __init__(self, topology: Topology, clock, barrier_timeout: float | None = None):
        self.topology = topology
        self.clock = clock
        self.virtual = clock.mode is ClockMode.VIRTUAL
        self.timeout = barrier_timeout or (
            DEFAULT_TIMEOUT_VIRTUAL if self.virtual else DEFAULT_TIMEOUT_WALL)
        self.server = start_root(topology.ranks, clock, self.timeout)
        self.root = self.server.root
        self.subs: dict[int, object] = {}
        if topology.mode is TopologyMode.TREE:
            for node in range(topology.nodes):
                self.subs[node] = start_sub(node, topology.ranks_per_node, self.server)
            self.pump()

    @property
    def bus(self) -> Bus | None:
        return self.server.bus if self.virtual else None

    def pump(self) -> None:
        if self.virtual:
            self.server.bus.pump()

    def endpoint_for(self, rank: int):
        if self.topology.mode is TopologyMode.TREE:
            return self.subs[self.topology.node_of(rank)]
        return self.server

    def open_session(self, rank: int, register: bool = True) -> Session:
        node = self.topology.node_of(rank)
        target = self.endpoint_for(rank)
        if self.virtual:
            session = Session(rank, node, VirtualWaiter(self.server.bus), self.timeout)
            session.attach(self.server.bus.connect(target, session))
        else:
            session = Session(rank, node, ThreadWaiter(), self.timeout)
            session.attach(TcpLink(target.address, session))
        if register:
            session.register()
        return session

    @property
    def root_session_count(self) -> int:
        return self.root.session_count

    def broadcast_checkpoint(self) -> int:
        ckpt_id = self.server.request_checkpoint()
        self.pump()
        return ckpt_id

    def kill_sub(self, node: int) -> None:
        sub = self.subs[node]
        if self.virtual:
            sub.kill()
            self.pump()
        else:
            sub.stop()

    def close(self) -> None:
        if not self.virtual:
            for sub in self.subs.values():
                sub.stop()
            self.server.stop()


def check_topology(plane: ControlPlane) -> None:
    want = plane.topology.expected_root_sessions
    got = plane.root_session_count
    if got != want:
        raise CoordinatorError(f"root has {got} sessions, expected {want}")
