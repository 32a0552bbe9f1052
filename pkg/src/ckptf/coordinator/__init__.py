"""Control plane: registration, barriers, key/value discovery and checkpoint fan-out."""

from .backoff import BackoffPolicy, ConnectionLimiter, ConnectReport, connect_with_backoff, simulate_connects
from .core import RootCoordinator, SubCoordinator
from .kv import KvEntry, KvStore
from .plane import ControlPlane, Topology, TopologyMode, start_root, start_sub
from .session import Session
from .wire import ControlMessage, MsgType

__all__ = [
    "BackoffPolicy", "ConnectionLimiter", "ConnectReport", "ControlMessage", "ControlPlane",
    "KvEntry", "KvStore", "MsgType", "RootCoordinator", "Session", "SubCoordinator",
    "Topology", "TopologyMode", "connect_with_backoff", "simulate_connects", "start_root",
    "start_sub",
]
