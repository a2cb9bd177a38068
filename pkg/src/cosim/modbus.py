"""Modbus-TCP subset: Read Holding Registers (0x03) and Write Multiple Registers (0x10).

The simulator side is a :class:`ModbusServer` over a :class:`RegisterMap`
whose named signals each occupy one register pair (a 32-bit value, high word
first). The interface side is a :class:`ModbusClient` that talks through any
*transport*, meaning any object with ``transact(request: bytes) -> bytes``. That
can be a real TCP connection (:class:`TcpTransport`) or a direct, in-process
call into a server (:class:`DirectTransport`) for virtual-time runs.
"""

from __future__ import annotations

import errno
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

from .core_time import Clock
from .signals import TimestampedSample

log = logging.getLogger(__name__)

READ_HOLDING_REGISTERS = 0x03
WRITE_MULTIPLE_REGISTERS = 0x10

ILLEGAL_FUNCTION = 0x01
ILLEGAL_DATA_ADDRESS = 0x02
ILLEGAL_DATA_VALUE = 0x03

MAX_READ_QTY = 125
MAX_WRITE_QTY = 123
DEFAULT_UNIT_ID = 1
DEFAULT_TIMEOUT_MS = 1000

_MBAP = struct.Struct(">HHHB")


class ModbusError(Exception):
    pass


class ModbusProtocolError(ModbusError):
    """Malformed or inconsistent frame."""


class ModbusRangeError(ModbusProtocolError, ValueError):
    """Quantity or address outside the protocol limits."""


class ModbusExceptionResponse(ModbusError):
    def __init__(self, function: int, code: int) -> None:
        super().__init__(f"modbus exception: function 0x{function:02X}, code 0x{code:02X}")
        self.function = function
        self.code = code


class ModbusConnectionError(ModbusError, ConnectionError):
    """Connection refused, reset or closed; distinct from protocol faults."""


class ModbusTimeout(ModbusConnectionError, TimeoutError):
    pass


# ---------------------------------------------------------------------------
# Codec


@dataclass(frozen=True)
class MbapHeader:
    transaction_id: int
    protocol_id: int
    length: int
    unit_id: int

    def pack(self) -> bytes:
        return _MBAP.pack(self.transaction_id, self.protocol_id, self.length, self.unit_id)


@dataclass(frozen=True)
class ReadRequest:
    transaction_id: int
    unit_id: int
    start: int
    quantity: int


@dataclass(frozen=True)
class ReadResponse:
    transaction_id: int
    unit_id: int
    registers: tuple[int, ...]


@dataclass(frozen=True)
class WriteRequest:
    transaction_id: int
    unit_id: int
    start: int
    values: tuple[int, ...]


@dataclass(frozen=True)
class WriteResponse:
    transaction_id: int
    unit_id: int
    start: int
    quantity: int


def _check_u16(name: str, value: int) -> None:
    if not 0 <= value <= 0xFFFF:
        raise ModbusRangeError(f"{name} {value} outside 0..65535")


def _frame(txn: int, unit: int, pdu: bytes) -> bytes:
    _check_u16("transaction id", txn)
    if not 0 <= unit <= 0xFF:
        raise ModbusRangeError(f"unit id {unit} outside 0..255")
    return MbapHeader(txn, 0, len(pdu) + 1, unit).pack() + pdu


def split_frame(data: bytes) -> tuple[MbapHeader, bytes]:
    """Validate the MBAP header and return it with the PDU."""
    if len(data) < _MBAP.size + 1:
        raise ModbusProtocolError(f"truncated frame ({len(data)} bytes)")
    header = MbapHeader(*_MBAP.unpack_from(data))
    if header.protocol_id != 0:
        raise ModbusProtocolError(f"protocol id {header.protocol_id} != 0")
    remaining = len(data) - 6
    if header.length != remaining:
        raise ModbusProtocolError(f"length field {header.length} != remaining bytes {remaining}")
    return header, data[_MBAP.size:]


def encode_read_request(txn: int, unit: int, start: int, qty: int) -> bytes:
    if not 1 <= qty <= MAX_READ_QTY:
        raise ModbusRangeError(f"read quantity {qty} outside 1..{MAX_READ_QTY}")
    _check_u16("start address", start)
    if start + qty > 0x10000:
        raise ModbusRangeError("read span runs past address 65535")
    return _frame(txn, unit, struct.pack(">BHH", READ_HOLDING_REGISTERS, start, qty))


def decode_read_request(data: bytes) -> ReadRequest:
    header, pdu = split_frame(data)
    if pdu[0] != READ_HOLDING_REGISTERS:
        raise ModbusProtocolError(f"function 0x{pdu[0]:02X} is not a read request")
    if len(pdu) != 5:
        raise ModbusProtocolError("read request PDU must be 5 bytes")
    _, start, qty = struct.unpack(">BHH", pdu)
    if not 1 <= qty <= MAX_READ_QTY:
        raise ModbusRangeError(f"read quantity {qty} outside 1..{MAX_READ_QTY}")
    return ReadRequest(header.transaction_id, header.unit_id, start, qty)


def encode_read_response(txn: int, unit: int, registers: Iterable[int]) -> bytes:
    regs = tuple(registers)
    if not 1 <= len(regs) <= MAX_READ_QTY:
        raise ModbusRangeError(f"register count {len(regs)} outside 1..{MAX_READ_QTY}")
    for r in regs:
        _check_u16("register", r)
    pdu = struct.pack(f">BB{len(regs)}H", READ_HOLDING_REGISTERS, 2 * len(regs), *regs)
    return _frame(txn, unit, pdu)


def _raise_if_exception(pdu: bytes) -> None:
    if pdu[0] & 0x80:
        if len(pdu) != 2:
            raise ModbusProtocolError("exception PDU must be 2 bytes")
        raise ModbusExceptionResponse(pdu[0] & 0x7F, pdu[1])


def decode_read_response(data: bytes) -> ReadResponse:
    header, pdu = split_frame(data)
    _raise_if_exception(pdu)
    if pdu[0] != READ_HOLDING_REGISTERS:
        raise ModbusProtocolError(f"function 0x{pdu[0]:02X} is not a read response")
    if len(pdu) < 2:
        raise ModbusProtocolError("truncated read response")
    count = pdu[1]
    if count % 2 or len(pdu) != 2 + count or count == 0:
        raise ModbusProtocolError(f"byte count {count} does not match payload of {len(pdu) - 2} bytes")
    regs = struct.unpack(f">{count // 2}H", pdu[2:])
    return ReadResponse(header.transaction_id, header.unit_id, regs)


def encode_write_request(txn: int, unit: int, start: int, values: Iterable[int]) -> bytes:
    vals = tuple(values)
    if not 1 <= len(vals) <= MAX_WRITE_QTY:
        raise ModbusRangeError(f"write count {len(vals)} outside 1..{MAX_WRITE_QTY}")
    _check_u16("start address", start)
    if start + len(vals) > 0x10000:
        raise ModbusRangeError("write span runs past address 65535")
    for v in vals:
        _check_u16("register", v)
    pdu = struct.pack(f">BHHB{len(vals)}H", WRITE_MULTIPLE_REGISTERS, start, len(vals), 2 * len(vals), *vals)
    return _frame(txn, unit, pdu)


def decode_write_request(data: bytes) -> WriteRequest:
    header, pdu = split_frame(data)
    if pdu[0] != WRITE_MULTIPLE_REGISTERS:
        raise ModbusProtocolError(f"function 0x{pdu[0]:02X} is not a write request")
    if len(pdu) < 6:
        raise ModbusProtocolError("truncated write request")
    _, start, qty, count = struct.unpack_from(">BHHB", pdu)
    if not 1 <= qty <= MAX_WRITE_QTY:
        raise ModbusRangeError(f"write quantity {qty} outside 1..{MAX_WRITE_QTY}")
    if count != 2 * qty or len(pdu) != 6 + count:
        raise ModbusProtocolError(f"byte count {count} inconsistent with quantity {qty}")
    vals = struct.unpack_from(f">{qty}H", pdu, 6)
    return WriteRequest(header.transaction_id, header.unit_id, start, vals)


def encode_write_response(txn: int, unit: int, start: int, qty: int) -> bytes:
    _check_u16("start address", start)
    if not 1 <= qty <= MAX_WRITE_QTY:
        raise ModbusRangeError(f"write quantity {qty} outside 1..{MAX_WRITE_QTY}")
    return _frame(txn, unit, struct.pack(">BHH", WRITE_MULTIPLE_REGISTERS, start, qty))


def decode_write_response(data: bytes) -> WriteResponse:
    header, pdu = split_frame(data)
    _raise_if_exception(pdu)
    if pdu[0] != WRITE_MULTIPLE_REGISTERS or len(pdu) != 5:
        raise ModbusProtocolError("malformed write response")
    _, start, qty = struct.unpack(">BHH", pdu)
    return WriteResponse(header.transaction_id, header.unit_id, start, qty)


def encode_exception(txn: int, unit: int, function: int, code: int) -> bytes:
    return _frame(txn, unit, bytes([(function | 0x80) & 0xFF, code & 0xFF]))


# ---------------------------------------------------------------------------
# 32-bit values as register pairs (high word first)


def f32_to_registers(x: float) -> tuple[int, int]:
    raw = struct.unpack(">I", struct.pack(">f", x))[0]
    return raw >> 16, raw & 0xFFFF


def registers_to_f32(regs) -> float:
    hi, lo = regs
    return struct.unpack(">f", struct.pack(">HH", hi, lo))[0]


def u32_to_registers(x: int) -> tuple[int, int]:
    x = int(x)
    if not 0 <= x <= 0xFFFFFFFF:
        raise ValueError(f"{x} does not fit in 32 bits")
    return x >> 16, x & 0xFFFF


def registers_to_u32(regs) -> int:
    hi, lo = regs
    return (hi << 16) | lo


_CODECS = {
    "f32": (f32_to_registers, registers_to_f32),
    "u32": (u32_to_registers, registers_to_u32),
}


# ---------------------------------------------------------------------------
# Register map


@dataclass(frozen=True)
class Binding:
    signal_id: str
    base_address: int
    kind: str = "measurement"  # or "command"
    dtype: str = "f32"

    def __post_init__(self) -> None:
        if self.kind not in ("measurement", "command"):
            raise ValueError(f"{self.signal_id}: kind must be measurement or command")
        if self.dtype not in _CODECS:
            raise ValueError(f"{self.signal_id}: dtype must be one of {sorted(_CODECS)}")
        if not 0 <= self.base_address <= 0xFFFE:
            raise ValueError(f"{self.signal_id}: base address {self.base_address} out of range")

    @property
    def addresses(self) -> range:
        return range(self.base_address, self.base_address + 2)

    def encode(self, value) -> tuple[int, int]:
        return _CODECS[self.dtype][0](value)

    def decode(self, regs):
        return _CODECS[self.dtype][1](regs)


class RegisterMap:
    """Holding registers plus named 2-register bindings.

    Every public method holds the map lock for its full duration, so a
    register pair is never observed half-written.
    """

    def __init__(self, bindings: Iterable[Binding] = ()) -> None:
        self.registers = [0] * 0x10000
        self.bindings: dict[str, Binding] = {}
        self._owner: dict[int, Binding] = {}
        self.lock = threading.RLock()
        for b in bindings:
            self.bind(b)

    def bind(self, binding: Binding) -> None:
        with self.lock:
            if binding.signal_id in self.bindings:
                raise ValueError(f"{binding.signal_id} already bound")
            for addr in binding.addresses:
                if addr in self._owner:
                    raise ValueError(
                        f"{binding.signal_id} overlaps {self._owner[addr].signal_id} at address {addr}"
                    )
            self.bindings[binding.signal_id] = binding
            for addr in binding.addresses:
                self._owner[addr] = binding

    def owner(self, address: int) -> Binding | None:
        return self._owner.get(address)

    def set_values(self, values: Mapping[str, float]) -> None:
        with self.lock:
            for name, value in values.items():
                b = self.bindings[name]
                self.registers[b.base_address], self.registers[b.base_address + 1] = b.encode(value)

    def set_value(self, name: str, value) -> None:
        self.set_values({name: value})

    def get_value(self, name: str):
        b = self.bindings[name]
        with self.lock:
            return b.decode(self.registers[b.base_address:b.base_address + 2])

    def get_values(self, names: Iterable[str]) -> dict:
        with self.lock:
            return {n: self.get_value(n) for n in names}

    # Request-level access used by the server; returns an exception code or None.
    def check_read(self, start: int, qty: int) -> int | None:
        for addr in range(start, start + qty):
            if addr not in self._owner:
                return ILLEGAL_DATA_ADDRESS
        return None

    def check_write(self, start: int, qty: int) -> int | None:
        end = start + qty
        for addr in range(start, end):
            b = self._owner.get(addr)
            if b is None or b.kind != "command":
                return ILLEGAL_DATA_ADDRESS
            if b.base_address < start or b.base_address + 2 > end:
                # would split a register pair
                return ILLEGAL_DATA_ADDRESS
        return None

    def read_span(self, start: int, qty: int) -> list[int]:
        with self.lock:
            return self.registers[start:start + qty]

    def write_span(self, start: int, values: Iterable[int]) -> None:
        vals = list(values)
        with self.lock:
            self.registers[start:start + len(vals)] = vals


def float_map(measurements: Iterable[str], commands: Iterable[str] = (), start: int = 0,
              dtypes: Mapping[str, str] | None = None) -> RegisterMap:
    """Lay out measurements then commands in consecutive register pairs."""
    dtypes = dict(dtypes or {})
    rmap = RegisterMap()
    addr = start
    for kind, names in (("measurement", measurements), ("command", commands)):
        for name in names:
            rmap.bind(Binding(name, addr, kind, dtypes.get(name, "f32")))
            addr += 2
    return rmap


# ---------------------------------------------------------------------------
# Server


class ModbusServer:
    """Modbus-TCP endpoint over a :class:`RegisterMap`.

    ``before_request`` is invoked (with no arguments) ahead of every request,
    which lets a simulator refresh its measurements lazily. ``on_write`` is
    called with the list of signal ids touched by a committed write.
    """

    def __init__(
        self,
        register_map: RegisterMap,
        unit_id: int = DEFAULT_UNIT_ID,
        before_request: Callable[[], None] | None = None,
        on_write: Callable[[list[str]], None] | None = None,
    ) -> None:
        self.map = register_map
        self.unit_id = unit_id
        self.before_request = before_request
        self.on_write = on_write
        self.requests_served = 0
        self._tcp: socketserver.ThreadingTCPServer | None = None
        self._thread: threading.Thread | None = None

    def handle_request(self, data: bytes) -> bytes:
        header, pdu = split_frame(data)
        txn, unit = header.transaction_id, header.unit_id
        fc = pdu[0]
        with self.map.lock:
            if self.before_request is not None:
                self.before_request()
            self.requests_served += 1
            if fc == READ_HOLDING_REGISTERS:
                if len(pdu) != 5:
                    return encode_exception(txn, unit, fc, ILLEGAL_DATA_VALUE)
                _, start, qty = struct.unpack(">BHH", pdu)
                if not 1 <= qty <= MAX_READ_QTY or start + qty > 0x10000:
                    return encode_exception(txn, unit, fc, ILLEGAL_DATA_VALUE)
                code = self.map.check_read(start, qty)
                if code is not None:
                    return encode_exception(txn, unit, fc, code)
                return encode_read_response(txn, unit, self.map.read_span(start, qty))
            if fc == WRITE_MULTIPLE_REGISTERS:
                try:
                    req = decode_write_request(data)
                except ModbusProtocolError:
                    return encode_exception(txn, unit, fc, ILLEGAL_DATA_VALUE)
                qty = len(req.values)
                code = self.map.check_write(req.start, qty)
                if code is not None:
                    return encode_exception(txn, unit, fc, code)
                self.map.write_span(req.start, req.values)
                if self.on_write is not None:
                    touched = sorted({self.map.owner(a).signal_id for a in range(req.start, req.start + qty)})
                    self.on_write(touched)
                return encode_write_response(txn, unit, req.start, qty)
            return encode_exception(txn, unit, fc, ILLEGAL_FUNCTION)

    # -- TCP ---------------------------------------------------------------

    def serve(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        """Start serving on a background thread; return the bound address."""
        server = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                sock = self.request
                while True:
                    try:
                        data = read_frame(sock)
                    except (ModbusConnectionError, OSError):
                        return
                    except ModbusProtocolError as exc:
                        log.warning("closing modbus connection: %s", exc)
                        return
                    try:
                        reply = server.handle_request(data)
                    except ModbusProtocolError as exc:
                        log.warning("closing modbus connection: %s", exc)
                        return
                    try:
                        sock.sendall(reply)
                    except OSError:
                        return

        class TCPServer(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True
            request_queue_size = 128

        self._tcp = TCPServer((host, port), Handler)
        self._thread = threading.Thread(target=self._tcp.serve_forever, name="modbus-server", daemon=True)
        self._thread.start()
        return self._tcp.server_address[:2]

    @property
    def address(self) -> tuple[str, int] | None:
        return None if self._tcp is None else self._tcp.server_address[:2]

    def shutdown(self) -> None:
        if self._tcp is not None:
            self._tcp.shutdown()
            self._tcp.server_close()
            self._tcp = None


def serve(register_map: RegisterMap, host: str = "127.0.0.1", port: int = 0, **kwargs) -> ModbusServer:
    server = ModbusServer(register_map, **kwargs)
    server.serve(host, port)
    return server


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout as exc:
            raise ModbusTimeout("timed out waiting for modbus data") from exc
        except (ConnectionResetError, BrokenPipeError) as exc:
            raise ModbusConnectionError(str(exc)) from exc
        if not chunk:
            raise ModbusConnectionError("connection closed by peer")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes:
    head = _recv_exact(sock, _MBAP.size)
    _, pid, length, _ = _MBAP.unpack(head)
    if pid != 0:
        raise ModbusProtocolError(f"protocol id {pid} != 0")
    if length < 2 or length > 254:
        raise ModbusProtocolError(f"implausible length field {length}")
    return head + _recv_exact(sock, length - 1)


# ---------------------------------------------------------------------------
# Client side


class TcpTransport:
    """Single blocking TCP connection; reconnects lazily after a failure."""

    def __init__(self, host: str, port: int, timeout_ms: int = DEFAULT_TIMEOUT_MS) -> None:
        self.host = host
        self.port = port
        self.timeout = timeout_ms / 1000.0
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _connect(self) -> socket.socket:
        try:
            sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except socket.timeout as exc:
            raise ModbusTimeout(f"connect to {self.host}:{self.port} timed out") from exc
        except OSError as exc:
            raise ModbusConnectionError(f"connect to {self.host}:{self.port} failed: {exc}") from exc
        sock.settimeout(self.timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return sock

    def transact(self, request: bytes) -> bytes:
        with self._lock:
            if self._sock is None:
                self._sock = self._connect()
            try:
                self._sock.sendall(request)
                return read_frame(self._sock)
            except ModbusError:
                self._drop()
                raise
            except OSError as exc:
                self._drop()
                if exc.errno in (errno.ECONNRESET, errno.EPIPE, errno.ECONNREFUSED):
                    raise ModbusConnectionError(str(exc)) from exc
                raise ModbusConnectionError(f"socket error: {exc}") from exc

    def _drop(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def close(self) -> None:
        with self._lock:
            self._drop()


class DirectTransport:
    """Hands request bytes straight to a server object in the same process."""

    def __init__(self, server: ModbusServer) -> None:
        self.server = server
        self.fail_with: ModbusError | None = None

    def transact(self, request: bytes) -> bytes:
        if self.fail_with is not None:
            raise self.fail_with
        return self.server.handle_request(request)

    def close(self) -> None:
        pass


class ModbusClient:
    """Reads and writes named signals through a register layout.

    The client needs the same bindings as the server to know where each
    signal lives; it never asks the server for them.
    """

    def __init__(self, transport, bindings: Iterable[Binding], unit_id: int = DEFAULT_UNIT_ID,
                 clock: Clock | None = None) -> None:
        self.transport = transport
        self.bindings = {b.signal_id: b for b in bindings}
        self.unit_id = unit_id
        self.clock = clock
        self._txn = 0

    def _next_txn(self) -> int:
        self._txn = (self._txn + 1) & 0xFFFF
        return self._txn

    def read_registers(self, start: int, qty: int) -> tuple[int, ...]:
        txn = self._next_txn()
        resp = decode_read_response(self.transport.transact(encode_read_request(txn, self.unit_id, start, qty)))
        if resp.transaction_id != txn:
            raise ModbusProtocolError(f"transaction id {resp.transaction_id} != {txn}")
        if len(resp.registers) != qty:
            raise ModbusProtocolError(f"asked for {qty} registers, got {len(resp.registers)}")
        return resp.registers

    def write_registers(self, start: int, values: Iterable[int]) -> None:
        vals = tuple(values)
        txn = self._next_txn()
        resp = decode_write_response(self.transport.transact(encode_write_request(txn, self.unit_id, start, vals)))
        if resp.transaction_id != txn or resp.start != start or resp.quantity != len(vals):
            raise ModbusProtocolError("write acknowledgement does not echo the request")

    def _spans(self, names: Iterable[str], limit: int) -> list[list[Binding]]:
        ordered = sorted((self.bindings[n] for n in names), key=lambda b: b.base_address)
        spans: list[list[Binding]] = []
        for b in ordered:
            if spans:
                cur = spans[-1]
                if b.base_address == cur[-1].base_address + 2 and b.base_address + 2 - cur[0].base_address <= limit:
                    cur.append(b)
                    continue
            spans.append([b])
        return spans

    def read_values(self, names: Iterable[str]) -> dict:
        out = {}
        for span in self._spans(names, MAX_READ_QTY):
            start = span[0].base_address
            regs = self.read_registers(start, 2 * len(span))
            for i, b in enumerate(span):
                out[b.signal_id] = b.decode(regs[2 * i:2 * i + 2])
        return out

    def read_signals(self, names: Iterable[str]) -> dict[str, TimestampedSample]:
        values = self.read_values(names)
        now = self.clock.now() if self.clock is not None else 0
        return {n: TimestampedSample(n, now, float(v)) for n, v in values.items()}

    def write_signals(self, values: Mapping[str, float]) -> None:
        for span in self._spans(values, MAX_WRITE_QTY):
            regs: list[int] = []
            for b in span:
                regs.extend(b.encode(values[b.signal_id]))
            self.write_registers(span[0].base_address, regs)

    def close(self) -> None:
        self.transport.close()
