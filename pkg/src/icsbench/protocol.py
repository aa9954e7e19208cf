"""Modbus/TCP codec, device server binding, and client.

Only the subset needed to observe and command a device is implemented:
read coils (0x01), read holding registers (0x03), write single coil (0x05)
and write single register (0x06). Any other function code is answered with
exception 1 (illegal function).

Device data model exposed by :func:`serve_device`:

=================  ===========================================
coils 0..N-1       output image (writes applied at cycle end)
coils 1000..       input image (read-only)
holding reg 0      cycle counter, low 16 bits (read-only)
holding reg 1..15  scratch registers
=================  ===========================================
"""

from __future__ import annotations

import enum
import socket
import struct
import time
from dataclasses import dataclass, field
from typing import Union

from .clock import VirtualClock
from .device_sim import Device, DeviceStateError, Mode

READ_COILS = 0x01
READ_HOLDING_REGISTERS = 0x03
WRITE_SINGLE_COIL = 0x05
WRITE_SINGLE_REGISTER = 0x06
FUNCTION_CODES = (READ_COILS, READ_HOLDING_REGISTERS, WRITE_SINGLE_COIL, WRITE_SINGLE_REGISTER)

EXC_ILLEGAL_FUNCTION = 1
EXC_ILLEGAL_DATA_ADDRESS = 2
EXC_ILLEGAL_DATA_VALUE = 3

INPUT_BANK_OFFSET = 1000
HOLDING_REGISTERS = 16
MBAP_LEN = 7
MAX_PDU_LEN = 253
COIL_ON = 0xFF00
COIL_OFF = 0x0000


class EncodeError(ValueError):
    pass


class DecodeErrorKind(enum.Enum):
    TRUNCATED = "Truncated"
    BAD_PROTOCOL_ID = "BadProtocolId"
    BAD_LENGTH = "BadLength"
    UNKNOWN_FUNCTION = "UnknownFunction"
    FIELD_RANGE = "FieldRange"


class DecodeError(ValueError):
    """Structured decode failure; `header` and `function` are set when they could be parsed."""

    def __init__(self, kind: DecodeErrorKind, detail: str = "",
                 header: MbapHeader | None = None, function: int | None = None) -> None:
        super().__init__(f"{kind.value}: {detail}" if detail else kind.value)
        self.kind = kind
        self.header = header
        self.function = function


@dataclass(frozen=True)
class MbapHeader:
    transaction_id: int
    unit_id: int
    protocol_id: int = 0
    # derived from the PDU on encode; populated on decode only
    length: int | None = field(default=None, compare=False)


@dataclass(frozen=True)
class ReadCoils:
    address: int
    count: int
    function = READ_COILS


@dataclass(frozen=True)
class ReadHoldingRegisters:
    address: int
    count: int
    function = READ_HOLDING_REGISTERS


@dataclass(frozen=True)
class WriteSingleCoil:
    address: int
    on: bool
    function = WRITE_SINGLE_COIL


@dataclass(frozen=True)
class WriteSingleRegister:
    address: int
    value: int
    function = WRITE_SINGLE_REGISTER


@dataclass(frozen=True)
class ExceptionResponse:
    function: int
    code: int


@dataclass(frozen=True)
class ReadCoilsResponse:
    coil_bytes: bytes
    function = READ_COILS

    def bits(self, count: int) -> list[int]:
        return [(self.coil_bytes[i // 8] >> (i % 8)) & 1 for i in range(count)]

    @classmethod
    def from_bits(cls, bits: list[int]) -> ReadCoilsResponse:
        out = bytearray((len(bits) + 7) // 8)
        for i, b in enumerate(bits):
            if b:
                out[i // 8] |= 1 << (i % 8)
        return cls(bytes(out))


@dataclass(frozen=True)
class ReadHoldingRegistersResponse:
    values: tuple[int, ...]
    function = READ_HOLDING_REGISTERS


Pdu = Union[ReadCoils, ReadHoldingRegisters, WriteSingleCoil, WriteSingleRegister, ExceptionResponse,
            ReadCoilsResponse, ReadHoldingRegistersResponse]


@dataclass(frozen=True)
class Frame:
    header: MbapHeader
    pdu_bytes: bytes

    def to_bytes(self) -> bytes:
        return _mbap(self.header, self.pdu_bytes) + self.pdu_bytes


def _u16(name: str, v: int) -> None:
    if not 0 <= v <= 0xFFFF:
        raise EncodeError(f"{name}={v} outside 16-bit range")


def encode_pdu(pdu: Pdu) -> bytes:
    if isinstance(pdu, (ReadCoils, ReadHoldingRegisters)):
        limit = 2000 if isinstance(pdu, ReadCoils) else 125
        _u16("address", pdu.address)
        if not 1 <= pdu.count <= limit:
            raise EncodeError(f"count={pdu.count} outside [1, {limit}]")
        if pdu.address + pdu.count > 0x10000:
            raise EncodeError("address + count exceeds address space")
        return struct.pack(">BHH", pdu.function, pdu.address, pdu.count)
    if isinstance(pdu, WriteSingleCoil):
        _u16("address", pdu.address)
        return struct.pack(">BHH", WRITE_SINGLE_COIL, pdu.address, COIL_ON if pdu.on else COIL_OFF)
    if isinstance(pdu, WriteSingleRegister):
        _u16("address", pdu.address)
        _u16("value", pdu.value)
        return struct.pack(">BHH", WRITE_SINGLE_REGISTER, pdu.address, pdu.value)
    if isinstance(pdu, ExceptionResponse):
        if not 1 <= pdu.function <= 0x7F or not 0 <= pdu.code <= 0xFF:
            raise EncodeError(f"bad exception response {pdu}")
        return bytes([pdu.function | 0x80, pdu.code])
    if isinstance(pdu, ReadCoilsResponse):
        if not 1 <= len(pdu.coil_bytes) <= 250:
            raise EncodeError("coil byte count outside [1, 250]")
        return bytes([READ_COILS, len(pdu.coil_bytes)]) + pdu.coil_bytes
    if isinstance(pdu, ReadHoldingRegistersResponse):
        if not 1 <= len(pdu.values) <= 125:
            raise EncodeError("register count outside [1, 125]")
        for v in pdu.values:
            _u16("register", v)
        return struct.pack(f">BB{len(pdu.values)}H", READ_HOLDING_REGISTERS, 2 * len(pdu.values), *pdu.values)
    raise EncodeError(f"unsupported PDU {pdu!r}")


def _mbap(header: MbapHeader, pdu_bytes: bytes) -> bytes:
    _u16("transaction_id", header.transaction_id)
    if header.protocol_id != 0:
        raise EncodeError("protocol_id must be 0")
    if not 0 <= header.unit_id <= 0xFF:
        raise EncodeError(f"unit_id={header.unit_id} outside 8-bit range")
    if not 1 <= len(pdu_bytes) <= MAX_PDU_LEN:
        raise EncodeError(f"PDU length {len(pdu_bytes)} outside [1, {MAX_PDU_LEN}]")
    return struct.pack(">HHHB", header.transaction_id, 0, len(pdu_bytes) + 1, header.unit_id)


def encode_frame(header: MbapHeader, pdu: Pdu) -> bytes:
    body = encode_pdu(pdu)
    return _mbap(header, body) + body


def decode_frame(data: bytes, *, response: bool = False) -> tuple[MbapHeader, Pdu]:
    """Decode one complete frame. Raises DecodeError for anything malformed.

    The same function codes are used in both directions, so `response`
    selects how read replies are interpreted.
    """
    data = bytes(data)
    if len(data) < MBAP_LEN:
        raise DecodeError(DecodeErrorKind.TRUNCATED, f"{len(data)} bytes, need {MBAP_LEN}")
    txn, proto, length, unit = struct.unpack_from(">HHHB", data)
    header = MbapHeader(txn, unit, proto, length)
    if proto != 0:
        raise DecodeError(DecodeErrorKind.BAD_PROTOCOL_ID, f"protocol_id={proto}", header)
    if not 2 <= length <= MAX_PDU_LEN + 1:
        raise DecodeError(DecodeErrorKind.BAD_LENGTH, f"length field {length}", header)
    available = len(data) - 6
    if available < length:
        raise DecodeError(DecodeErrorKind.TRUNCATED, f"length field {length}, {available} bytes follow", header)
    if available > length:
        raise DecodeError(DecodeErrorKind.BAD_LENGTH, f"length field {length}, {available} bytes follow", header)
    pdu = data[MBAP_LEN:]
    fc = pdu[0]
    body = pdu[1:]

    def fail(kind: DecodeErrorKind, detail: str) -> DecodeError:
        return DecodeError(kind, detail, header, fc & 0x7F)

    if fc & 0x80 and response:
        if len(body) != 1:
            raise fail(DecodeErrorKind.BAD_LENGTH, "exception PDU must be 2 bytes")
        return header, ExceptionResponse(fc & 0x7F, body[0])
    if fc not in FUNCTION_CODES:
        raise fail(DecodeErrorKind.UNKNOWN_FUNCTION, f"function 0x{fc:02x}")

    if response and fc in (READ_COILS, READ_HOLDING_REGISTERS):
        if not body or body[0] != len(body) - 1:
            raise fail(DecodeErrorKind.BAD_LENGTH, "byte count mismatch")
        payload = body[1:]
        if fc == READ_COILS:
            if not 1 <= len(payload) <= 250:
                raise fail(DecodeErrorKind.FIELD_RANGE, "coil byte count")
            return header, ReadCoilsResponse(payload)
        if len(payload) % 2 or not 1 <= len(payload) // 2 <= 125:
            raise fail(DecodeErrorKind.FIELD_RANGE, "register byte count")
        return header, ReadHoldingRegistersResponse(struct.unpack(f">{len(payload) // 2}H", payload))

    if len(body) != 4:
        raise fail(DecodeErrorKind.BAD_LENGTH, f"function 0x{fc:02x} expects 4 data bytes, got {len(body)}")
    a, b = struct.unpack(">HH", body)
    if fc in (READ_COILS, READ_HOLDING_REGISTERS):
        limit = 2000 if fc == READ_COILS else 125
        if not 1 <= b <= limit or a + b > 0x10000:
            raise fail(DecodeErrorKind.FIELD_RANGE, f"count={b} at address {a}")
        cls = ReadCoils if fc == READ_COILS else ReadHoldingRegisters
        return header, cls(a, b)
    if fc == WRITE_SINGLE_COIL:
        if b not in (COIL_ON, COIL_OFF):
            raise fail(DecodeErrorKind.FIELD_RANGE, f"coil value 0x{b:04x}")
        return header, WriteSingleCoil(a, b == COIL_ON)
    return header, WriteSingleRegister(a, b)


def mbap_framer(buf: bytearray) -> bytes | None:
    """Split one frame off a TCP byte stream; garbage lengths flush the buffer."""
    if len(buf) < MBAP_LEN:
        return None
    length = struct.unpack_from(">H", buf, 4)[0]
    if not 2 <= length <= MAX_PDU_LEN + 1:
        out = bytes(buf)
        buf.clear()
        return out
    total = 6 + length
    if len(buf) < total:
        return None
    out = bytes(buf[:total])
    del buf[:total]
    return out


# -- server ----------------------------------------------------------------------


def _exception(header: MbapHeader, function: int, code: int) -> bytes:
    return encode_frame(MbapHeader(header.transaction_id, header.unit_id), ExceptionResponse(function, code))


def handle_request(device: Device, payload: bytes) -> bytes | None:
    """Service one request frame against the device data model.

    Runs inside the device's cycle, so reads see the output image at cycle
    start and coil writes land at cycle end.
    """
    try:
        header, pdu = decode_frame(payload)
    except DecodeError as exc:
        if exc.header is None or not exc.function:
            return None  # no header to answer, or function 0 which has no exception form
        if exc.kind is DecodeErrorKind.UNKNOWN_FUNCTION:
            return _exception(exc.header, exc.function, EXC_ILLEGAL_FUNCTION)
        if exc.kind is DecodeErrorKind.FIELD_RANGE:
            return _exception(exc.header, exc.function, EXC_ILLEGAL_DATA_VALUE)
        return None
    reply = MbapHeader(header.transaction_id, header.unit_id)
    outputs = device.outputs
    n_out = len(outputs)
    if isinstance(pdu, ReadCoils):
        lo, hi = pdu.address, pdu.address + pdu.count
        if hi <= n_out:
            bits = list(outputs[lo:hi])
        elif lo >= INPUT_BANK_OFFSET and hi <= INPUT_BANK_OFFSET + device.profile.input_channels:
            bits = list(device.inputs[lo - INPUT_BANK_OFFSET:hi - INPUT_BANK_OFFSET])
        else:
            return _exception(header, READ_COILS, EXC_ILLEGAL_DATA_ADDRESS)
        return encode_frame(reply, ReadCoilsResponse.from_bits(bits))
    if isinstance(pdu, ReadHoldingRegisters):
        if pdu.address + pdu.count > HOLDING_REGISTERS:
            return _exception(header, READ_HOLDING_REGISTERS, EXC_ILLEGAL_DATA_ADDRESS)
        regs = _registers(device)
        regs[0] = device.cycle_count & 0xFFFF
        values = tuple(regs[pdu.address:pdu.address + pdu.count])
        return encode_frame(reply, ReadHoldingRegistersResponse(values))
    if isinstance(pdu, WriteSingleCoil):
        if pdu.address >= n_out:
            return _exception(header, WRITE_SINGLE_COIL, EXC_ILLEGAL_DATA_ADDRESS)
        device.command_output(pdu.address, int(pdu.on))
        return encode_frame(reply, pdu)
    if isinstance(pdu, WriteSingleRegister):
        if not 1 <= pdu.address < HOLDING_REGISTERS:
            return _exception(header, WRITE_SINGLE_REGISTER, EXC_ILLEGAL_DATA_ADDRESS)
        _registers(device)[pdu.address] = pdu.value
        return encode_frame(reply, pdu)
    return None  # stray exception frames from a peer are ignored


def _registers(device: Device) -> list[int]:
    regs = getattr(device, "_modbus_registers", None)
    if regs is None:
        regs = [0] * HOLDING_REGISTERS
        device._modbus_registers = regs
    return regs


@dataclass
class ServerHandle:
    device: Device
    port: int

    @property
    def address(self) -> tuple[str, int] | None:
        """Bound TCP address in real-time mode, None in virtual mode."""
        if self.device.clock.is_virtual:
            return None
        return self.device.endpoint(self.port)


def serve_device(device: Device, port: int = 502) -> ServerHandle:
    if device.mode is Mode.POWERED_OFF:
        raise DeviceStateError(f"device {device.name!r} must be running to serve Modbus")
    device.register_service(port, handle_request, mbap_framer)
    return ServerHandle(device, port)


# -- client ----------------------------------------------------------------------

Endpoint = Union[tuple[str, int], tuple[Device, int]]


def client_request(endpoint: Endpoint, header: MbapHeader, pdu: Pdu,
                   timeout: float = 1.0) -> tuple[Pdu, float]:
    """Send one request and wait for its reply.

    `endpoint` is ``(host, port)`` for a TCP peer or ``(device, port)`` for a
    device on a virtual clock. `timeout` is in seconds; the returned round
    trip time is in microseconds. Raises TimeoutError, ConnectionError or
    DecodeError.
    """
    frame = encode_frame(header, pdu)
    target, port = endpoint
    if isinstance(target, Device):
        return _virtual_request(target, port, frame, timeout)
    t0 = time.perf_counter()
    try:
        with socket.create_connection((target, port), timeout=timeout) as sock:
            sock.sendall(frame)
            head = _recv_exact(sock, MBAP_LEN)
            length = struct.unpack_from(">H", head, 4)[0]
            rest = _recv_exact(sock, max(length - 1, 0)) if length <= MAX_PDU_LEN + 1 else b""
    except socket.timeout as exc:
        raise TimeoutError(f"no reply from {target}:{port} within {timeout}s") from exc
    rtt = (time.perf_counter() - t0) * 1e6
    _hdr, resp = decode_frame(head + rest, response=True)
    return resp, rtt


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed connection")
        buf.extend(chunk)
    return bytes(buf)


def _virtual_request(device: Device, port: int, frame: bytes, timeout: float) -> tuple[Pdu, float]:
    clock = device.clock
    if not isinstance(clock, VirtualClock) or not device.driven:
        raise ValueError("virtual endpoints need a clock-driven device on a VirtualClock")
    if not device.has_port(port):
        raise ConnectionRefusedError(f"{device.name}: port {port} closed")
    if device.mode is Mode.POWERED_OFF:
        raise ConnectionRefusedError(f"{device.name}: powered off")
    sent = clock.now
    box: list = []
    device.deliver_message(frame, port=port, reply=lambda resp, t: box.append((resp, t)))
    deadline = sent + timeout * 1e6
    while not box and (nxt := clock.peek()) is not None and nxt <= deadline:
        clock.run_until(nxt)
    if not box or box[0][0] is None:
        clock.run_until(deadline)
        raise TimeoutError(f"no reply from {device.name}:{port} within {timeout}s")
    resp, t = box[0]
    _hdr, pdu = decode_frame(resp, response=True)
    return pdu, t - sent


def seed_corpus(unit_id: int = 1) -> list[bytes]:
    """One valid request frame per implemented function code."""
    pdus: list[Pdu] = [ReadCoils(0, 2), ReadHoldingRegisters(0, 1), WriteSingleCoil(1, True),
                       WriteSingleRegister(1, 0x1234)]
    return [encode_frame(MbapHeader(i + 1, unit_id), p) for i, p in enumerate(pdus)]
