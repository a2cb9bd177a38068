"""In-process link with latency injection on the virtual clock."""

from __future__ import annotations

from collections import deque

from ..core_time import LatencyLedger, Leg, Scheduler
from .base import FrameListener, TransportDisconnected
from .frame import Frame
from .latency import LatencyModel, stream_rng

DELIVERY_PRIORITY = 0


class LoopbackEndpoint:
    def __init__(self, link: "LoopbackLink", name: str) -> None:
        self.link = link
        self.name = name
        self.peer: LoopbackEndpoint | None = None
        self.listener: FrameListener | None = None
        self._inbox: deque[tuple[int, Frame]] = deque()
        self._rng = stream_rng(link.seed, f"{link.name}:{name}")
        self._last_arrival = 0
        self.sent = 0
        self.delivered = 0
        self.closed = False

    @property
    def connected(self) -> bool:
        return self.link.up and not self.closed

    def send(self, frame: Frame) -> int:
        """Queue ``frame`` for the peer; return its virtual arrival time."""
        if not self.connected:
            raise TransportDisconnected(f"{self.link.name}: link down")
        sched = self.link.scheduler
        now = sched.now()
        arrival = max(now + self.link.model.draw_us(self._rng), self._last_arrival)
        self._last_arrival = arrival
        self.sent += 1
        sched.call_at(arrival, self.peer._deliver, frame, now, priority=DELIVERY_PRIORITY)
        return arrival

    def _deliver(self, frame: Frame, sent_at: int) -> None:
        now = self.link.scheduler.now()
        self.delivered += 1
        if self.link.ledger is not None:
            self.link.ledger.record_leg(self.link.leg, sent_at, now)
        if self.listener is not None:
            self.listener(frame, now)
        else:
            self._inbox.append((now, frame))

    def poll_timed(self) -> list[tuple[int, Frame]]:
        out = list(self._inbox)
        self._inbox.clear()
        return out

    def poll(self) -> list[Frame]:
        return [f for _, f in self.poll_timed()]

    def reconnect(self) -> None:
        if not self.link.up:
            raise TransportDisconnected(f"{self.link.name}: link still down")
        self.closed = False

    def close(self) -> None:
        self.closed = True


class LoopbackLink:
    """Two endpoints joined by a latency model.

    Every frame arrives exactly one model draw after it was sent, unless that
    would overtake an earlier frame from the same endpoint, in which case it
    arrives together with it (per-sender FIFO). Each direction draws from its
    own RNG stream seeded from ``(seed, name, endpoint)``.
    """

    def __init__(self, scheduler: Scheduler, model: LatencyModel, seed: int = 0, name: str = "loopback",
                 ledger: LatencyLedger | None = None, leg: Leg = Leg.SOCKET_ONEWAY) -> None:
        self.scheduler = scheduler
        self.model = model
        self.seed = seed
        self.name = name
        self.ledger = ledger
        self.leg = leg
        self.up = True
        self.a = LoopbackEndpoint(self, "a")
        self.b = LoopbackEndpoint(self, "b")
        self.a.peer, self.b.peer = self.b, self.a

    def set_down(self, down: bool = True) -> None:
        self.up = not down


def loopback_pair(model: LatencyModel, seed: int, scheduler: Scheduler, name: str = "loopback",
                  **kwargs) -> tuple[LoopbackEndpoint, LoopbackEndpoint]:
    link = LoopbackLink(scheduler, model, seed, name, **kwargs)
    return link.a, link.b
