"""Length-prefixed frames over TCP with non-blocking reads.

One reader and one writer may use a :class:`FramedConnection` at the same
time; each side has its own lock. :class:`DelayedSender` wraps any endpoint
and holds frames back by a latency-model draw before sending them, which is
how the VPN path is emulated on a LAN.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import select
import socket
import threading
import time

from ..core_time import Clock, RealtimeClock
from .base import TransportDisconnected, TransportTimeout
from .frame import Frame, FrameBuffer, encode_frame
from .latency import LatencyModel, stream_rng

log = logging.getLogger(__name__)

DEFAULT_PORT = 8602


class FramedConnection:
    def __init__(self, sock: socket.socket | None, clock: Clock | None = None,
                 address: tuple[str, int] | None = None, send_timeout_s: float = 5.0) -> None:
        self.clock = clock
        self.address = address  # set for dialled connections, enables reconnect
        self.send_timeout_s = send_timeout_s
        self._read_lock = threading.Lock()
        self._write_lock = threading.Lock()
        self.buffer = FrameBuffer()
        self.sock = None
        self._eof = True
        if sock is not None:
            self._attach(sock)

    def _attach(self, sock: socket.socket) -> None:
        sock.setblocking(False)
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass
        self.sock: socket.socket | None = sock
        self.buffer = FrameBuffer()
        self._eof = False

    @property
    def connected(self) -> bool:
        return self.sock is not None and not self._eof

    @property
    def decode_errors(self) -> int:
        return self.buffer.decode_errors

    def send(self, frame: Frame) -> None:
        data = memoryview(encode_frame(frame))
        with self._write_lock:
            sock = self.sock
            if sock is None or self._eof:
                raise TransportDisconnected("connection closed")
            deadline = time.monotonic() + self.send_timeout_s
            while data:
                try:
                    n = sock.send(data)
                    data = data[n:]
                except BlockingIOError:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise TransportTimeout("peer is not draining the connection")
                    select.select([], [sock], [], min(remaining, 0.05))
                except OSError as exc:
                    self._eof = True
                    raise TransportDisconnected(str(exc)) from exc

    def poll_timed(self) -> list[tuple[int, Frame]]:
        """Drain whatever has arrived; never blocks.

        Frames already buffered when the peer closes are still returned; the
        following poll raises :class:`TransportDisconnected`.
        """
        with self._read_lock:
            sock = self.sock
            if sock is None:
                raise TransportDisconnected("connection closed")
            chunks = []
            while not self._eof:
                try:
                    chunk = sock.recv(65536)
                except BlockingIOError:
                    break
                except OSError:
                    self._eof = True
                    break
                if not chunk:
                    self._eof = True
                    break
                chunks.append(chunk)
            frames = self.buffer.feed(b"".join(chunks)) if chunks else []
            if not frames and self._eof:
                raise TransportDisconnected("peer closed the connection")
            now = self.clock.now() if self.clock is not None else 0
            return [(now, f) for f in frames]

    def poll(self) -> list[Frame]:
        return [f for _, f in self.poll_timed()]

    def wait_readable(self, timeout_s: float) -> bool:
        sock = self.sock
        if sock is None:
            return False
        try:
            r, _, _ = select.select([sock], [], [], timeout_s)
        except (OSError, ValueError):
            return True
        return bool(r)

    def reconnect(self, timeout_s: float = 1.0) -> None:
        if self.address is None:
            raise TransportDisconnected("accepted connections cannot redial")
        self.close()
        try:
            sock = socket.create_connection(self.address, timeout=timeout_s)
        except OSError as exc:
            raise TransportDisconnected(f"reconnect to {self.address} failed: {exc}") from exc
        with self._read_lock, self._write_lock:
            self._attach(sock)

    def close(self) -> None:
        sock, self.sock = self.sock, None
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass


def connect(host: str, port: int = DEFAULT_PORT, timeout_s: float = 1.0, clock: Clock | None = None,
            lazy: bool = False) -> FramedConnection:
    """Dial ``host:port``. With ``lazy`` the connection starts closed and the
    first :meth:`FramedConnection.reconnect` dials."""
    if lazy:
        return FramedConnection(None, clock=clock, address=(host, port))
    try:
        sock = socket.create_connection((host, port), timeout=timeout_s)
    except OSError as exc:
        raise TransportDisconnected(f"connect to {host}:{port} failed: {exc}") from exc
    return FramedConnection(sock, clock=clock, address=(host, port))


class FramedListener:
    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT, clock: Clock | None = None) -> None:
        self.clock = clock
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((host, port))
        self.sock.listen(8)
        self.sock.setblocking(False)

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def accept(self, timeout_s: float = 0.0) -> FramedConnection | None:
        if timeout_s > 0:
            r, _, _ = select.select([self.sock], [], [], timeout_s)
            if not r:
                return None
        try:
            conn, _ = self.sock.accept()
        except (BlockingIOError, OSError):
            return None
        return FramedConnection(conn, clock=self.clock)

    def close(self) -> None:
        self.sock.close()


class DelayedSender:
    """Releases each frame one latency draw after it was handed over.

    Release times never go backwards, so frames leave in submission order.
    A send failure on the worker thread is re-raised on the next ``send``.
    """

    def __init__(self, endpoint, model: LatencyModel, seed: int = 0, name: str = "delay",
                 clock: Clock | None = None) -> None:
        self.endpoint = endpoint
        self.model = model
        self.clock = clock or RealtimeClock()
        self._rng = stream_rng(seed, name)
        self._heap: list[tuple[int, int, Frame]] = []
        self._counter = itertools.count()
        self._cv = threading.Condition()
        self._last_release = 0
        self._error: Exception | None = None
        self._closed = False
        self.sent = 0
        self._thread = threading.Thread(target=self._run, name=f"{name}-sender", daemon=True)
        self._thread.start()

    def send(self, frame: Frame) -> None:
        with self._cv:
            if self._error is not None:
                err, self._error = self._error, None
                raise TransportDisconnected(str(err)) from err
            release = max(self.clock.now() + self.model.draw_us(self._rng), self._last_release)
            self._last_release = release
            heapq.heappush(self._heap, (release, next(self._counter), frame))
            self._cv.notify()

    def _run(self) -> None:
        while True:
            with self._cv:
                while not self._closed and not self._heap:
                    self._cv.wait()
                if self._closed:
                    return
                release, _, frame = self._heap[0]
                wait_us = release - self.clock.now()
                if wait_us > 0:
                    self._cv.wait(wait_us / 1e6)
                    continue
                heapq.heappop(self._heap)
            try:
                self.endpoint.send(frame)
                self.sent += 1
            except (TransportDisconnected, TransportTimeout, OSError) as exc:
                log.debug("delayed send failed: %s", exc)
                with self._cv:
                    self._error = exc

    def pending(self) -> int:
        with self._cv:
            return len(self._heap)

    def flush(self, timeout_s: float = 5.0) -> None:
        deadline = time.monotonic() + timeout_s
        while self.pending() and time.monotonic() < deadline:
            time.sleep(0.001)

    def poll(self) -> list[Frame]:
        return self.endpoint.poll()

    def reconnect(self) -> None:
        self.endpoint.reconnect()

    def close(self) -> None:
        with self._cv:
            self._closed = True
            self._cv.notify()
        self._thread.join(timeout=1.0)


def one_way_latency_us(recv_us: int, frame: Frame) -> int:
    return recv_us - frame.send_sim_time


__all__ = [
    "DEFAULT_PORT",
    "DelayedSender",
    "FramedConnection",
    "FramedListener",
    "connect",
    "one_way_latency_us",
]
