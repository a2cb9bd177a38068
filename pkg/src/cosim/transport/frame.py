"""Binary frame format shared by every inter-federate transport.

Wire layout (big-endian), preceded by a u32 payload length::

    "CSL1" | u8 kind | u64 seq | u64 send_sim_time_us
    | u16 len + sender_id | u32 n
    | n x (u16 len + signal_id | u64 sim_time_us | f64 value)
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from ..signals import TimestampedSample

MAGIC = b"CSL1"
_PREFIX = struct.Struct(">I")
_HEAD = struct.Struct(">4sBQQ")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_SAMPLE_TAIL = struct.Struct(">Qd")
MAX_PAYLOAD = 64 * 1024 * 1024


class FrameKind(enum.IntEnum):
    MEASUREMENT = 0
    COMMAND = 1


class FrameDecodeError(ValueError):
    pass


class BadMagic(FrameDecodeError):
    pass


class TruncatedFrame(FrameDecodeError):
    pass


class LengthMismatch(FrameDecodeError):
    pass


@dataclass(frozen=True)
class Frame:
    kind: FrameKind
    seq: int
    sender_id: str
    send_sim_time: int
    samples: tuple[TimestampedSample, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", FrameKind(self.kind))
        object.__setattr__(self, "samples", tuple(self.samples))
        if not self.samples:
            raise ValueError("a frame needs at least one sample")
        if self.seq < 0 or self.send_sim_time < 0:
            raise ValueError("seq and send_sim_time must be non-negative")

    def values(self) -> dict[str, float]:
        return {s.signal_id: s.value for s in self.samples}

    @property
    def stream(self) -> tuple[str, FrameKind]:
        return self.sender_id, self.kind


def _encode_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("identifier longer than 65535 bytes")
    return _U16.pack(len(raw)) + raw


def encode_payload(frame: Frame) -> bytes:
    parts = [
        _HEAD.pack(MAGIC, int(frame.kind), frame.seq, frame.send_sim_time),
        _encode_str(frame.sender_id),
        _U32.pack(len(frame.samples)),
    ]
    for s in frame.samples:
        parts.append(_encode_str(s.signal_id))
        parts.append(_SAMPLE_TAIL.pack(s.sim_time, s.value))
    return b"".join(parts)


def encode_frame(frame: Frame) -> bytes:
    payload = encode_payload(frame)
    return _PREFIX.pack(len(payload)) + payload


def _take(buf: memoryview, offset: int, n: int) -> tuple[memoryview, int]:
    if offset + n > len(buf):
        raise TruncatedFrame(f"needed {n} bytes at offset {offset}, payload is {len(buf)} bytes")
    return buf[offset:offset + n], offset + n


def _take_str(buf: memoryview, offset: int) -> tuple[str, int]:
    raw, offset = _take(buf, offset, 2)
    (n,) = _U16.unpack(raw)
    raw, offset = _take(buf, offset, n)
    try:
        return bytes(raw).decode("utf-8"), offset
    except UnicodeDecodeError as exc:
        raise FrameDecodeError(f"identifier is not valid UTF-8: {exc}") from exc


def decode_payload(payload: bytes) -> Frame:
    buf = memoryview(payload)
    if len(buf) >= 4 and bytes(buf[:4]) != MAGIC:
        raise BadMagic(f"bad magic {bytes(buf[:4])!r}")
    raw, off = _take(buf, 0, _HEAD.size)
    _, kind, seq, send_t = _HEAD.unpack(raw)
    sender, off = _take_str(buf, off)
    raw, off = _take(buf, off, 4)
    (count,) = _U32.unpack(raw)
    samples = []
    for _ in range(count):
        sid, off = _take_str(buf, off)
        raw, off = _take(buf, off, _SAMPLE_TAIL.size)
        t, v = _SAMPLE_TAIL.unpack(raw)
        try:
            samples.append(TimestampedSample(sid, t, v))
        except ValueError as exc:
            raise FrameDecodeError(str(exc)) from exc
    if off != len(buf):
        raise LengthMismatch(f"{len(buf) - off} trailing bytes after last sample")
    try:
        return Frame(FrameKind(kind), seq, sender, send_t, tuple(samples))
    except ValueError as exc:
        raise FrameDecodeError(str(exc)) from exc


def decode_frame(data: bytes) -> Frame:
    if len(data) < _PREFIX.size:
        raise TruncatedFrame("missing length prefix")
    (n,) = _PREFIX.unpack_from(data)
    if n != len(data) - _PREFIX.size:
        raise LengthMismatch(f"length prefix {n} != payload size {len(data) - _PREFIX.size}")
    return decode_payload(bytes(data[_PREFIX.size:]))


class FrameBuffer:
    """Reassembles frames from a byte stream.

    A payload that fails to decode is skipped using its length prefix and
    counted in ``decode_errors``; the stream stays aligned.
    """

    def __init__(self) -> None:
        self._buf = bytearray()
        self.decode_errors = 0
        self.last_error: FrameDecodeError | None = None

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        frames: list[Frame] = []
        while len(self._buf) >= _PREFIX.size:
            (n,) = _PREFIX.unpack_from(self._buf)
            if n > MAX_PAYLOAD:
                # cannot resynchronize past an absurd length; drop what we have
                self.decode_errors += 1
                self.last_error = LengthMismatch(f"payload length {n} exceeds limit")
                self._buf.clear()
                break
            if len(self._buf) < _PREFIX.size + n:
                break
            payload = bytes(self._buf[_PREFIX.size:_PREFIX.size + n])
            del self._buf[:_PREFIX.size + n]
            try:
                frames.append(decode_payload(payload))
            except FrameDecodeError as exc:
                self.decode_errors += 1
                self.last_error = exc
        return frames

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)
