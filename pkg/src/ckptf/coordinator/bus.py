"""In-memory transport for single-driver (VIRTUAL clock) runs.

Frames travel as encoded bytes through one FIFO, so the wire format is
exercised exactly as on a socket. ``pump`` delivers until the FIFO is
empty; nothing moves unless the driver pumps.
"""

from __future__ import annotations

import itertools
from collections import Counter, deque

from .core import RootCoordinator, SubCoordinator
from .wire import decode


class Link:
    def __init__(self, bus: "Bus", server, client, conn_id: int):
        self.bus = bus
        self.server = server
        self.client = client
        self.conn_id = conn_id
        self.closed = False

    def send_up(self, frame: bytes) -> None:
        if self.closed:
            raise ConnectionError("link closed")
        self.bus._queue.append((self, True, frame))

    def send_down(self, frame: bytes) -> None:
        if not self.closed:
            self.bus._queue.append((self, False, frame))

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self.bus._queue.append((self, None, b""))


class Bus:
    def __init__(self, clock):
        self.clock = clock
        self._queue: deque = deque()
        self._ids = itertools.count(1)
        self.servers: list = []
        self.frames = Counter()
        self.delivered_frames = 0

    def connect(self, server, client) -> Link:
        link = Link(self, server, client, next(self._ids))
        server.on_connect(link)
        return link

    def pump(self) -> int:
        n = 0
        while self._queue:
            link, up, frame = self._queue.popleft()
            n += 1
            if up is None:
                link.server.on_disconnect(link)
                link.client.on_link_closed(link)
                continue
            self.delivered_frames += 1
            if up:
                link.server.on_frame(link, frame)
            else:
                link.client.on_frame(frame)
        return n

    def next_timer(self) -> float | None:
        times = [t for s in self.servers if (t := s.next_deadline()) is not None]
        return min(times) if times else None

    def fire_timers(self) -> None:
        for s in self.servers:
            s.on_tick()


class BusRoot:
    """Root coordinator attached to a bus."""

    def __init__(self, bus: Bus, root: RootCoordinator):
        self.bus = bus
        self.root = root
        self.links: dict[int, Link] = {}
        bus.servers.append(self)

    def on_connect(self, link: Link) -> None:
        self.links[link.conn_id] = link
        self.root.connect(link.conn_id)

    def on_frame(self, link: Link, frame: bytes) -> None:
        msg = decode(frame)
        self.bus.frames[msg.type] += 1
        self._send(self.root.handle(link.conn_id, msg, self.bus.clock.now()))

    def on_disconnect(self, link: Link) -> None:
        self.links.pop(link.conn_id, None)
        self._send(self.root.disconnect(link.conn_id, self.bus.clock.now()))

    def _send(self, out) -> None:
        for conn, msg in out:
            link = self.links.get(conn)
            if link is not None:
                link.send_down(msg.encode())

    def request_checkpoint(self) -> int:
        ckpt_id, out = self.root.request_checkpoint()
        self._send(out)
        return ckpt_id

    def next_deadline(self):
        return self.root.next_deadline()

    def on_tick(self) -> None:
        self._send(self.root.check_timeouts(self.bus.clock.now()))


class _Upstream:
    """Client-side callbacks of a sub-coordinator's link to the root."""

    def __init__(self, owner: "BusSub"):
        self.owner = owner

    def on_frame(self, frame: bytes) -> None:
        if self.owner.alive:
            self.owner._send(self.owner.sub.from_root(decode(frame)))

    def on_link_closed(self, link: Link) -> None:
        if self.owner.alive:
            self.owner._send(self.owner.sub.root_disconnect())


class BusSub:
    """Sub-coordinator attached to a bus: a server for local ranks and a client of the root."""

    def __init__(self, bus: Bus, sub: SubCoordinator, root_server: BusRoot):
        self.bus = bus
        self.sub = sub
        self.alive = True
        self.links: dict[int, Link] = {}
        self.up = bus.connect(root_server, _Upstream(self))
        self.up.send_up(sub.register_message().encode())

    def on_connect(self, link: Link) -> None:
        self.links[link.conn_id] = link

    def on_frame(self, link: Link, frame: bytes) -> None:
        if self.alive:
            self._send(self.sub.from_rank(link.conn_id, decode(frame)))

    def on_disconnect(self, link: Link) -> None:
        self.links.pop(link.conn_id, None)
        if self.alive:
            self._send(self.sub.rank_disconnect(link.conn_id))

    def _send(self, out) -> None:
        for dest, msg in out:
            if dest == SubCoordinator.UP:
                if not self.up.closed:
                    self.up.send_up(msg.encode())
            else:
                link = self.links.get(dest)
                if link is not None:
                    link.send_down(msg.encode())

    def kill(self) -> None:
        """Simulate the sub-coordinator process dying."""
        self.alive = False
        self.up.close()
        for link in list(self.links.values()):
            link.close()

    def next_deadline(self):
        return None

    def on_tick(self) -> None:
        pass


class VirtualWaiter:
    """Blocks a session by pumping the bus and jumping the clock to timers."""

    def __init__(self, bus: Bus):
        self.bus = bus

    def notify(self) -> None:
        pass

    def wait(self, predicate, timeout: float) -> bool:
        clock = self.bus.clock
        deadline = clock.now() + timeout
        while True:
            self.bus.pump()
            if predicate():
                return True
            t = self.bus.next_timer()
            if t is None or t > deadline:
                clock.advance_to(deadline)
                self.bus.fire_timers()
                self.bus.pump()
                return predicate()
            clock.advance_to(t)
            self.bus.fire_timers()


