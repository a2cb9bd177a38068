from __future__ import annotations

from typing import Callable, Protocol

from .frame import Frame


class TransportDisconnected(ConnectionError):
    """The peer went away; the endpoint can be reconnected."""


class TransportTimeout(TimeoutError):
    pass


FrameListener = Callable[[Frame, int], None]


class FrameEndpoint(Protocol):
    """What every transport endpoint offers.

    ``poll`` never blocks and returns zero or more complete frames; ``send``
    raises :class:`TransportDisconnected` when the link is down.
    """

    def send(self, frame: Frame) -> None: ...

    def poll(self) -> list[Frame]: ...

    def reconnect(self) -> None: ...

    def close(self) -> None: ...


class SeqTracker:
    """Checks per-(sender, kind) sequence numbers as frames are received."""

    def __init__(self) -> None:
        self.last: dict[tuple, int] = {}
        self.gaps = 0
        self.violations = 0

    def observe(self, frame: Frame) -> bool:
        key = frame.stream
        prev = self.last.get(key)
        if prev is not None and frame.seq <= prev:
            self.violations += 1
            return False
        if prev is not None and frame.seq > prev + 1:
            self.gaps += frame.seq - prev - 1
        self.last[key] = frame.seq
        return True
