"""Loopback TCP transport for WALL-clock runs.

Every socket has Nagle's algorithm disabled: control messages are a few
dozen bytes and a coalescing delay on each one stalls barriers.
"""

from __future__ import annotations

import itertools
import os
import selectors
import socket
import threading
import time

from ..errors import CoordinatorError
from .core import RootCoordinator, SubCoordinator
from .wire import HEADER, decode

ENV_COORD = "CKPTF_COORD"


def _nodelay(sock: socket.socket) -> socket.socket:
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def endpoint_from_env(default: str | None = None) -> str | None:
    return os.environ.get(ENV_COORD, default)


class _FrameSplitter:
    def __init__(self):
        self.buf = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self.buf += data
        frames = []
        while len(self.buf) >= HEADER.size:
            length, _ = HEADER.unpack_from(self.buf, 0)
            end = HEADER.size + length
            if len(self.buf) < end:
                break
            frames.append(bytes(self.buf[:end]))
            del self.buf[:end]
        return frames


class TcpServer:
    """Selector loop that serializes every event through ``handler``.

    The handler sees ``on_connect(conn)``, ``on_frame(conn, msg)``,
    ``on_disconnect(conn)`` and ``on_tick()``, always under ``self.lock``
    and always from the loop thread, so its state changes form one total
    order. ``send`` may be called from any thread.
    """

    def __init__(self, handler, host: str = "127.0.0.1", port: int = 0, tick_ms: float = 20):
        self.handler = handler
        self.lock = threading.RLock()
        self.tick = tick_ms / 1000.0
        self._sel = selectors.DefaultSelector()
        self._ids = itertools.count(1)
        self._socks: dict[object, socket.socket] = {}
        self._splitters: dict[object, _FrameSplitter] = {}
        self._send_locks: dict[object, threading.Lock] = {}
        try:
            self._listener = socket.create_server((host, port), backlog=4096)
        except OSError as exc:
            raise CoordinatorError(f"cannot listen on {host}:{port}: {exc}") from exc
        self._listener.setblocking(False)
        self._sel.register(self._listener, selectors.EVENT_READ, None)
        self.address = "%s:%d" % self._listener.getsockname()[:2]
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True, name=f"ctl-{self.address}")

    def start(self) -> "TcpServer":
        self._thread.start()
        return self

    def add_socket(self, conn, sock: socket.socket) -> None:
        """Multiplex an outgoing connection (e.g. a sub-coordinator's uplink)."""
        with self.lock:
            self._track(conn, sock)

    def _track(self, conn, sock: socket.socket) -> None:
        sock.setblocking(False)
        self._socks[conn] = sock
        self._splitters[conn] = _FrameSplitter()
        self._send_locks[conn] = threading.Lock()
        self._sel.register(sock, selectors.EVENT_READ, conn)

    def send(self, conn, frame: bytes) -> None:
        sock = self._socks.get(conn)
        if sock is None:
            return
        with self._send_locks[conn]:
            view = memoryview(frame)
            while view:
                try:
                    n = sock.send(view)
                    view = view[n:]
                except BlockingIOError:
                    time.sleep(0.0005)
                except OSError:
                    return

    def _run(self) -> None:
        while not self._stop.is_set():
            for key, _ in self._sel.select(self.tick):
                if key.data is None:
                    self._accept()
                else:
                    self._read(key.data)
            with self.lock:
                self.handler.on_tick()

    def _accept(self) -> None:
        try:
            sock, _ = self._listener.accept()
        except BlockingIOError:
            return
        conn = next(self._ids)
        with self.lock:
            self._track(conn, _nodelay(sock))
            self.handler.on_connect(conn)

    def _read(self, conn) -> None:
        sock = self._socks.get(conn)
        if sock is None:
            return
        try:
            data = sock.recv(1 << 16)
        except BlockingIOError:
            return
        except OSError:
            data = b""
        with self.lock:
            if not data:
                self._drop(conn)
                self.handler.on_disconnect(conn)
                return
            for frame in self._splitters[conn].feed(data):
                self.handler.on_frame(conn, decode(frame))

    def _drop(self, conn) -> None:
        sock = self._socks.pop(conn, None)
        if sock is not None:
            self._sel.unregister(sock)
            sock.close()

    def close_conn(self, conn) -> None:
        with self.lock:
            self._drop(conn)

    def stop(self) -> None:
        self._stop.set()
        if self._thread.is_alive():
            self._thread.join(timeout=2)
        with self.lock:
            for conn in list(self._socks):
                self._drop(conn)
            self._sel.close()
            self._listener.close()


class TcpRoot:
    """Root coordinator served over TCP."""

    def __init__(self, root: RootCoordinator, host: str = "127.0.0.1", port: int = 0):
        self.root = root
        self._t0 = time.monotonic()
        self.server = TcpServer(self, host, port)
        self.address = self.server.address

    def now(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0

    def start(self) -> "TcpRoot":
        self.server.start()
        return self

    def on_connect(self, conn) -> None:
        self.root.connect(conn)

    def on_frame(self, conn, msg) -> None:
        self._send(self.root.handle(conn, msg, self.now()))

    def on_disconnect(self, conn) -> None:
        self._send(self.root.disconnect(conn, self.now()))

    def on_tick(self) -> None:
        self._send(self.root.check_timeouts(self.now()))

    def _send(self, out) -> None:
        for conn, msg in out:
            self.server.send(conn, msg.encode())

    def request_checkpoint(self) -> int:
        with self.server.lock:
            ckpt_id, out = self.root.request_checkpoint()
            self._send(out)
            return ckpt_id

    def stop(self) -> None:
        self.server.stop()


class TcpSub:
    """Sub-coordinator: a TCP server for local ranks plus one uplink to the root."""

    def __init__(self, sub: SubCoordinator, root_address: str, connect=None):
        self.sub = sub
        self.server = TcpServer(self)
        self.address = self.server.address
        host, port = parse_endpoint(root_address)
        try:
            up = connect() if connect else socket.create_connection((host, port), timeout=5)
        except OSError as exc:
            self.server.stop()
            raise CoordinatorError(f"sub-coordinator {sub.node}: root unreachable: {exc}") from exc
        _nodelay(up)
        self.server.add_socket(SubCoordinator.UP, up)
        self.server.send(SubCoordinator.UP, sub.register_message().encode())

    def start(self) -> "TcpSub":
        self.server.start()
        return self

    def on_connect(self, conn) -> None:
        pass

    def on_frame(self, conn, msg) -> None:
        if conn == SubCoordinator.UP:
            self._send(self.sub.from_root(msg))
        else:
            self._send(self.sub.from_rank(conn, msg))

    def on_disconnect(self, conn) -> None:
        if conn == SubCoordinator.UP:
            self._send(self.sub.root_disconnect())
            for c in list(self.sub.ranks.values()):
                self.server.close_conn(c)
        else:
            self._send(self.sub.rank_disconnect(conn))

    def on_tick(self) -> None:
        pass

    def _send(self, out) -> None:
        for conn, msg in out:
            self.server.send(conn, msg.encode())

    def stop(self) -> None:
        self.server.stop()


class TcpLink:
    """Client connection feeding frames to ``client.on_frame`` from a reader thread."""

    def __init__(self, address: str, client, timeout: float = 5.0):
        host, port = parse_endpoint(address)
        self.client = client
        try:
            self.sock = _nodelay(socket.create_connection((host, port), timeout=timeout))
        except OSError as exc:
            raise CoordinatorError(f"cannot reach coordinator at {address}: {exc}") from exc
        self.sock.settimeout(None)
        self._send_lock = threading.Lock()
        self.closed = False
        self._reader = threading.Thread(target=self._read, daemon=True)
        self._reader.start()

    def send_up(self, frame: bytes) -> None:
        if self.closed:
            raise ConnectionError("link closed")
        with self._send_lock:
            self.sock.sendall(frame)

    def _read(self) -> None:
        splitter = _FrameSplitter()
        while True:
            try:
                data = self.sock.recv(1 << 16)
            except OSError:
                data = b""
            if not data:
                self.closed = True
                self.client.on_link_closed(self)
                return
            for frame in splitter.feed(data):
                self.client.on_frame(frame)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
