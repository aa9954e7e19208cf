"""Attack engine: floods, connection exhaustion, port sweeps and mutation fuzzing.

Every transmitted byte string is logged as one AttackLog event and recorded
to the capture from the attacker address, so the two can be correlated.
"""

from __future__ import annotations

import csv
import random
import re
import socket
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

from .clock import PRIO_NETWORK, PRIO_OBSERVE, RealClock, VirtualClock
from .device_sim import ConfigError, Device, DeviceStateError, Mode
from .protocol import MBAP_LEN, MbapHeader, ReadHoldingRegisters, encode_frame, seed_corpus

ATTACKER_ADDR = "192.168.0.200"
ATTACKER_PORT = 40000
MUTATORS = ("bit_flip", "byte_overwrite", "truncate", "extend_random", "length_field_corrupt",
            "function_code_sweep")
DEFAULT_FUZZ_TIMEOUT = 20_000.0  # us
CONN_SPACING = 10.0  # us between connection attempts
SWEEP_SPACING = 1000.0  # us between port probes


@dataclass(frozen=True, kw_only=True)
class AttackSpec:
    target: str
    duration: float  # us
    port: int | None = None  # default: first modbus port, else first listen port

    def __post_init__(self) -> None:
        if self.duration <= 0:
            raise ConfigError("attack duration must be > 0")

    @property
    def kind(self) -> str:
        return re.sub(r"(?<!^)(?=[A-Z])", "_", type(self).__name__).lower()


@dataclass(frozen=True, kw_only=True)
class Flood(AttackSpec):
    rate: float  # packets per second; 0 is a no-op attack (idle baseline)
    payload: str = "junk"  # "junk" | "valid_modbus"
    junk_bytes: int = 64

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.rate < 0:
            raise ConfigError("flood rate must be >= 0")
        if self.payload not in ("junk", "valid_modbus"):
            raise ConfigError(f"unknown flood payload {self.payload!r}")
        if self.payload == "junk" and self.junk_bytes < 1:
            raise ConfigError("junk_bytes must be >= 1")


@dataclass(frozen=True, kw_only=True)
class ConnExhaust(AttackSpec):
    target_conns: int
    hold: float  # us

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.target_conns < 1 or self.hold <= 0:
            raise ConfigError("conn exhaust needs target_conns >= 1 and hold > 0")


@dataclass(frozen=True, kw_only=True)
class Fuzz(AttackSpec):
    seed: int = 0
    iterations: int = 1000
    mutators: tuple[str, ...] = MUTATORS
    base_frames: str = "default"
    response_timeout: float = DEFAULT_FUZZ_TIMEOUT  # us

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.iterations < 1:
            raise ConfigError("fuzz iterations must be > 0")
        unknown = set(self.mutators) - set(MUTATORS)
        if unknown or not self.mutators:
            raise ConfigError(f"bad mutator set {sorted(unknown) or '[]'}")
        if self.base_frames not in CORPORA:
            raise ConfigError(f"unknown corpus {self.base_frames!r}")


@dataclass(frozen=True, kw_only=True)
class PortSweep(AttackSpec):
    ports: tuple[int, ...]

    def __post_init__(self) -> None:
        super().__post_init__()
        if not self.ports:
            raise ConfigError("port sweep needs at least one port")


@dataclass(frozen=True)
class AttackEvent:
    timestamp: float
    case_id: int
    sent: bytes
    outcome: str  # sent | refused | timeout | response | error
    response: bytes | None = None
    detail: str = ""

    def outcome_text(self) -> str:
        if self.outcome == "response":
            return f"response:{(self.response or b'').hex()}"
        if self.outcome == "error":
            return f"error:{self.detail}"
        return self.outcome


@dataclass
class AttackLog:
    spec: AttackSpec
    started_at: float
    ended_at: float = 0.0
    events: list[AttackEvent] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def count(self, outcome: str) -> int:
        return sum(1 for e in self.events if e.outcome == outcome)


CORPORA: dict[str, Callable[[], list[bytes]]] = {"default": seed_corpus}


# -- mutation ---------------------------------------------------------------------


def mutate(frame: bytes, rng: random.Random, mutators: tuple[str, ...] = MUTATORS) -> bytes:
    """Apply one randomly chosen mutation operator.

    The result is between 1 and ``2 * len(frame) + 16`` bytes long. Operators
    that need a longer frame than given fall back to a byte overwrite.
    """
    if not frame:
        raise ValueError("cannot mutate an empty frame")
    op = rng.choice(mutators)
    return apply_mutator(op, frame, rng)


def apply_mutator(op: str, frame: bytes, rng: random.Random) -> bytes:
    buf = bytearray(frame)
    n = len(buf)
    if op == "truncate" and n < 2 or op == "length_field_corrupt" and n < 6 or op == "function_code_sweep" and n < 8:
        op = "byte_overwrite"
    if op == "bit_flip":
        for _ in range(rng.randint(1, 4)):
            bit = rng.randrange(n * 8)
            buf[bit // 8] ^= 1 << (bit % 8)
    elif op == "byte_overwrite":
        buf[rng.randrange(n)] = rng.randrange(256)
    elif op == "truncate":
        del buf[rng.randint(1, n - 1):]
    elif op == "extend_random":
        buf.extend(rng.randbytes(rng.randint(1, n + 16)))
    elif op == "length_field_corrupt":
        old = struct.unpack_from(">H", buf, 4)[0]
        new = rng.randrange(0x10000 - 1)
        struct.pack_into(">H", buf, 4, new if new < old else new + 1)
    elif op == "function_code_sweep":
        old = buf[7]
        new = rng.randrange(255)
        buf[7] = new if new < old else new + 1
    else:
        raise ValueError(f"unknown mutator {op!r}")
    return bytes(buf)


# -- execution ---------------------------------------------------------------------


def default_port(device: Device, spec: AttackSpec) -> int:
    if spec.port is not None:
        return spec.port
    modbus = device.profile.ports("modbus")
    if modbus:
        return modbus[0]
    ports = device.profile.ports()
    if not ports:
        raise ConfigError(f"device {device.name!r} has no listen ports to attack")
    return ports[0]


def resolve_target(spec: AttackSpec, target: Device | Mapping[str, Device]) -> Device:
    if isinstance(target, Device):
        if target.name != spec.target:
            raise ConfigError(f"attack targets {spec.target!r}, got device {target.name!r}")
        return target
    try:
        return target[spec.target]
    except KeyError:
        raise ConfigError(f"attack target {spec.target!r} is not in the fleet") from None


def run_attack(spec: AttackSpec, target: Device | Mapping[str, Device], clock: VirtualClock | RealClock,
               capture=None, *, seed: int = 0) -> AttackLog:
    """Execute `spec` against its target for its configured duration.

    `seed` drives junk payloads; fuzzing uses the Fuzz seed field.
    """
    device = resolve_target(spec, target)
    runner_cls = _VirtualRunner if clock.is_virtual else _RealtimeRunner
    runner = runner_cls(spec, device, clock, capture, seed)
    return runner.run()


def fuzz_session(target: Device | Mapping[str, Device], spec: Fuzz, clock: VirtualClock | RealClock,
                 capture=None) -> AttackLog:
    if not CORPORA[spec.base_frames]():
        raise ConfigError("fuzz corpus is empty")
    return run_attack(spec, target, clock, capture)


class _Runner:
    def __init__(self, spec: AttackSpec, device: Device, clock, capture, seed: int) -> None:
        self.spec = spec
        self.device = device
        self.clock = clock
        self.capture = capture
        self.rng = random.Random(seed)
        self.log = AttackLog(spec, clock.now)
        self.t0 = clock.now
        self.end = self.t0 + spec.duration
        self._lock = threading.Lock()

    def port(self) -> int:
        return default_port(self.device, self.spec)

    def _cap(self, t: float, port: int, payload: bytes, to_device: bool) -> None:
        if self.capture is not None:
            self.capture.record_exchange(t, ATTACKER_ADDR, self.device, port, payload, to_device,
                                         peer_port=ATTACKER_PORT + (port % 1000))

    def emit(self, event: AttackEvent) -> None:
        with self._lock:
            self.log.events.append(event)

    def flood_payload(self, i: int) -> bytes:
        spec = self.spec
        assert isinstance(spec, Flood)
        if spec.payload == "valid_modbus":
            return encode_frame(MbapHeader(i & 0xFFFF, 1), ReadHoldingRegisters(0, 1))
        return self.rng.randbytes(spec.junk_bytes)

    def finish(self) -> AttackLog:
        self.log.events.sort(key=lambda e: (e.timestamp, e.case_id))
        self.log.ended_at = self.end
        spec = self.spec
        if isinstance(spec, PortSweep):
            expected = set(self.device.profile.ports())
            found = {spec.ports[e.case_id] for e in self.log.events if e.outcome == "sent"}
            swept = {spec.ports[e.case_id] for e in self.log.events}
            self.log.notes = {
                "open": sorted(found),
                "unexpected_open": sorted(found - expected),
                "missing": sorted((expected & swept) - found),
            }
        return self.log


class _VirtualRunner(_Runner):
    def run(self) -> AttackLog:
        spec = self.spec
        clock: VirtualClock = self.clock
        if isinstance(spec, Flood):
            if spec.rate > 0:
                clock.schedule(self.t0, self._flood, 0, self.port(), priority=PRIO_NETWORK)
        elif isinstance(spec, ConnExhaust):
            self._conns: list[int] = []
            for i in range(spec.target_conns):
                t = self.t0 + i * CONN_SPACING
                if t >= self.end:
                    break
                clock.schedule(t, self._connect, i, priority=PRIO_NETWORK)
            clock.schedule(min(self.t0 + spec.hold, self.end), self._release, priority=PRIO_NETWORK)
        elif isinstance(spec, PortSweep):
            for i, port in enumerate(spec.ports):
                t = self.t0 + i * SWEEP_SPACING
                if t >= self.end:
                    break
                clock.schedule(t, self._sweep, i, port, priority=PRIO_NETWORK)
        elif isinstance(spec, Fuzz):
            self.rng = random.Random(spec.seed)
            self._corpus = CORPORA[spec.base_frames]()
            self._fuzz_next(0, self.t0)
        clock.run_until(self.end)
        if isinstance(spec, ConnExhaust):
            self._release()
        return self.finish()

    def _flood(self, i: int, port: int) -> None:
        now = self.clock.now
        payload = self.flood_payload(i)
        self._cap(now, port, payload, True)
        on_reply = None
        if self.spec.payload == "valid_modbus" and self.capture is not None:
            def on_reply(resp: bytes | None, t: float) -> None:
                if resp is not None:
                    self._cap(t, port, resp, False)
        self.device.deliver_message(payload, port=port, reply=on_reply)
        self.log.events.append(AttackEvent(now, i, payload, "sent"))
        nxt = self.t0 + (i + 1) * 1e6 / self.spec.rate
        if nxt < self.end:
            self.clock.schedule(nxt, self._flood, i + 1, port, priority=PRIO_NETWORK)

    def _connect(self, i: int) -> None:
        now = self.clock.now
        port = self.port()
        self._cap(now, port, b"", True)
        if self.device.mode is Mode.NET_STACK_CRASHED:
            outcome = "timeout"
        else:
            cid = self.device.open_connection()
            if cid is None:
                outcome = "refused"
            else:
                self._conns.append(cid)
                self.device.deliver_message(b"", cid, port=port)
                outcome = "sent"
        self.log.events.append(AttackEvent(now, i, b"", outcome))

    def _release(self) -> None:
        for cid in self._conns:
            self.device.close_connection(cid)
        self._conns.clear()

    def _sweep(self, i: int, port: int) -> None:
        now = self.clock.now
        self._cap(now, port, b"", True)
        mode = self.device.mode
        if mode is not Mode.RUNNING:
            outcome = "timeout" if mode is Mode.NET_STACK_CRASHED else "refused"
        elif self.device.has_port(port):
            self.device.deliver_message(b"", port=port)
            outcome = "sent"
        else:
            outcome = "refused"
        self.log.events.append(AttackEvent(now, i, b"", outcome))

    def _fuzz_next(self, i: int, t: float) -> None:
        spec = self.spec
        assert isinstance(spec, Fuzz)
        if i >= spec.iterations or t + spec.response_timeout > self.end:
            return
        self.clock.schedule(t, self._fuzz_send, i, priority=PRIO_NETWORK)

    def _fuzz_send(self, i: int) -> None:
        spec = self.spec
        now = self.clock.now
        port = self.port()
        mutant = mutate(self.rng.choice(self._corpus), self.rng, spec.mutators)
        state = {"done": False}
        self._cap(now, port, mutant, True)

        def on_reply(resp: bytes | None, t: float) -> None:
            if state["done"] or resp is None or t - now > spec.response_timeout:
                return
            state["done"] = True
            self._cap(t, port, resp, False)
            self.log.events.append(AttackEvent(now, i, mutant, "response", resp))
            self._fuzz_next(i + 1, t)

        def on_deadline() -> None:
            if state["done"]:
                return
            state["done"] = True
            self.log.events.append(AttackEvent(now, i, mutant, "timeout"))
            self._fuzz_next(i + 1, self.clock.now)

        self.device.deliver_message(mutant, port=port, reply=on_reply)
        self.clock.schedule(now + spec.response_timeout, on_deadline, priority=PRIO_OBSERVE)


class _RealtimeRunner(_Runner):
    def endpoint(self, port: int) -> tuple[str, int]:
        try:
            return self.device.endpoint(port)
        except (KeyError, DeviceStateError):
            base = self.device.port_base
            return self.device.host, (base + port) if base else port

    def run(self) -> AttackLog:
        spec = self.spec
        if isinstance(spec, Flood):
            self._flood()
        elif isinstance(spec, ConnExhaust):
            self._conn_exhaust()
        elif isinstance(spec, PortSweep):
            self._sweep()
        elif isinstance(spec, Fuzz):
            self.rng = random.Random(spec.seed)
            self._fuzz()
        self.clock.sleep_until(self.end)
        return self.finish()

    def _flood(self) -> None:
        spec = self.spec
        if spec.rate == 0:
            return
        port = self.port()
        addr = self.endpoint(port)
        sock = None
        i = 0
        while True:
            t = self.t0 + i * 1e6 / spec.rate
            if t >= self.end:
                break
            self.clock.sleep_until(t)
            payload = self.flood_payload(i)
            now = self.clock.now
            try:
                if sock is None:
                    sock = socket.create_connection(addr, timeout=0.5)
                    sock.setblocking(False)
                sock.send(payload)
                outcome, detail = "sent", ""
            except BlockingIOError:
                outcome, detail = "sent", ""  # kernel buffer full; bytes dropped locally
            except OSError as exc:
                outcome, detail = "error", type(exc).__name__
                if sock is not None:
                    sock.close()
                sock = None
            self._cap(now, port, payload, True)
            self.emit(AttackEvent(now, i, payload, outcome, detail=detail))
            i += 1
        if sock is not None:
            sock.close()

    def _conn_exhaust(self) -> None:
        spec = self.spec
        port = self.port()
        addr = self.endpoint(port)
        held: list[socket.socket] = []
        for i in range(spec.target_conns):
            now = self.clock.now
            if now >= self.end:
                break
            self._cap(now, port, b"", True)
            try:
                s = socket.create_connection(addr, timeout=0.5)
            except ConnectionRefusedError:
                self.emit(AttackEvent(now, i, b"", "refused"))
                continue
            except OSError:
                self.emit(AttackEvent(now, i, b"", "timeout"))
                continue
            # the server closes surplus connections straight away
            s.settimeout(0.05)
            try:
                closed = s.recv(1) == b""
            except socket.timeout:
                closed = False
            except OSError:
                closed = True
            if closed:
                s.close()
                self.emit(AttackEvent(now, i, b"", "refused"))
            else:
                held.append(s)
                self.emit(AttackEvent(now, i, b"", "sent"))
        self.clock.sleep_until(min(self.t0 + spec.hold, self.end))
        for s in held:
            s.close()

    def _sweep(self) -> None:
        for i, port in enumerate(self.spec.ports):
            now = self.clock.now
            if now >= self.end:
                break
            self._cap(now, port, b"", True)
            try:
                with socket.create_connection(self.endpoint(port), timeout=0.2):
                    outcome = "sent"
            except ConnectionRefusedError:
                outcome = "refused"
            except OSError:
                outcome = "timeout"
            self.emit(AttackEvent(now, i, b"", outcome))
            self.clock.sleep_until(now + SWEEP_SPACING)

    def _fuzz(self) -> None:
        spec = self.spec
        port = self.port()
        addr = self.endpoint(port)
        corpus = CORPORA[spec.base_frames]()
        timeout_s = spec.response_timeout / 1e6
        sock = None
        for i in range(spec.iterations):
            now = self.clock.now
            if now + spec.response_timeout > self.end:
                break
            mutant = mutate(self.rng.choice(corpus), self.rng, spec.mutators)
            self._cap(now, port, mutant, True)
            try:
                if sock is None:
                    sock = socket.create_connection(addr, timeout=timeout_s)
                sock.settimeout(timeout_s)
                sock.sendall(mutant)
                resp = _recv_frame(sock)
                self._cap(self.clock.now, port, resp, False)
                self.emit(AttackEvent(now, i, mutant, "response", resp))
            except socket.timeout:
                self.emit(AttackEvent(now, i, mutant, "timeout"))
                sock.close()
                sock = None
            except OSError as exc:
                self.emit(AttackEvent(now, i, mutant, "error", detail=type(exc).__name__))
                if sock is not None:
                    sock.close()
                sock = None
        if sock is not None:
            sock.close()


def _recv_frame(sock: socket.socket) -> bytes:
    buf = b""
    while len(buf) < MBAP_LEN:
        chunk = sock.recv(MBAP_LEN - len(buf))
        if not chunk:
            raise ConnectionResetError("peer closed")
        buf += chunk
    length = struct.unpack_from(">H", buf, 4)[0]
    while len(buf) < 6 + length:
        chunk = sock.recv(6 + length - len(buf))
        if not chunk:
            raise ConnectionResetError("peer closed")
        buf += chunk
    return buf


# -- attack log CSV ---------------------------------------------------------------------


def write_attack_log(log: AttackLog, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp_us", "case_id", "outcome", "bytes_hex"])
        for e in log.events:
            w.writerow([f"{e.timestamp:.3f}", e.case_id, e.outcome_text(), e.sent.hex()])


def read_attack_log(path: str | Path) -> list[AttackEvent]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["timestamp_us", "case_id", "outcome", "bytes_hex"]:
            raise ValueError(f"{path}: bad attack log header {header!r}")
        for row in reader:
            outcome, _, rest = row[2].partition(":")
            response = bytes.fromhex(rest) if outcome == "response" else None
            detail = rest if outcome == "error" else ""
            out.append(AttackEvent(float(row[0]), int(row[1]), bytes.fromhex(row[3]), outcome, response, detail))
    return out


__all__ = [
    "AttackEvent", "AttackLog", "AttackSpec", "ConnExhaust", "Flood", "Fuzz", "PortSweep", "MUTATORS",
    "mutate", "apply_mutator", "run_attack", "fuzz_session", "write_attack_log", "read_attack_log",
]
