"""Simulated device under test.

A device is split into a control part, which runs a fixed scan-cycle program
(toggle output 0 every cycle, mirror input 0 onto output 1), and a
communication part, which queues incoming network messages and services them
at the start of each cycle. Each serviced message lengthens the cycle by
``c_pkt``, so network load shows up directly in the output toggle period.

Cycle timing model::

    duration = t_exec + U(0, h_max) + c_pkt * min(queue_len, q_max)

Inputs are sampled when a cycle begins; outputs are written when it ends.
"""

from __future__ import annotations

import bisect
import enum
import itertools
import logging
import random
import socket
import threading
import warnings
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from .clock import PRIO_CONTROL, PRIO_CYCLE, RealClock, VirtualClock

log = logging.getLogger(__name__)

ECHO_PORT = 7
SERVICE_TAGS = ("modbus", "stub")
TOGGLE_FREQ_RANGE = (20.0, 20_000.0)


class ConfigError(ValueError):
    """Invalid device or scenario configuration."""


class DeviceStateError(RuntimeError):
    """Operation not allowed in the device's current mode."""


class StartupError(RuntimeError):
    """Real-time listeners could not be bound."""


class ConfigWarning(UserWarning):
    pass


class Mode(enum.Enum):
    POWERED_OFF = "PoweredOff"
    RUNNING = "Running"
    NET_STACK_CRASHED = "NetStackCrashed"


class Delivery(enum.Enum):
    ENQUEUED = "enqueued"
    DROPPED_OFF = "powered_off"
    DROPPED_CRASHED = "crashed"
    DROPPED_OVERFLOW = "overflow"

    @property
    def accepted(self) -> bool:
        return self is Delivery.ENQUEUED


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    vendor_label: str = ""
    product_label: str = ""
    listen_ports: tuple[tuple[int, str], ...] = ((502, "modbus"),)
    t_exec: float = 140.0
    h_max: float = 160.0
    c_pkt: float = 10.0
    q_max: int = 16
    buffer_cap: int = 64
    conn_max: int = 8
    crash_overload_cycles: int = 0
    output_channels: int = 2
    input_channels: int = 1
    toggle_enabled: bool = True
    rng_seed: int = 0

    @property
    def idle_cycle_mean(self) -> float:
        return self.t_exec + self.h_max / 2

    @property
    def idle_toggle_frequency(self) -> float:
        """Square-wave frequency of output 0 at the mean idle cycle time (Hz)."""
        return 1e6 / (2 * self.idle_cycle_mean)

    def ports(self, tag: str | None = None) -> list[int]:
        return [p for p, t in self.listen_ports if tag is None or t == tag]

    def validate(self) -> None:
        """Raise ConfigError naming the first violated invariant."""
        checks = [
            (bool(self.name), "name must be non-empty"),
            (self.t_exec > 0, "t_exec > 0"),
            (self.h_max >= 0, "h_max >= 0"),
            (self.c_pkt >= 0, "c_pkt >= 0"),
            (self.q_max >= 1, "q_max >= 1"),
            (self.buffer_cap >= self.q_max, "buffer_cap >= q_max"),
            (self.conn_max >= 1, "conn_max >= 1"),
            (self.crash_overload_cycles >= 0, "crash_overload_cycles >= 0"),
            (self.output_channels >= 1, "output_channels >= 1"),
            (self.input_channels >= 0, "input_channels >= 0"),
        ]
        for ok, what in checks:
            if not ok:
                raise ConfigError(f"profile {self.name!r}: invariant violated: {what}")
        seen = set()
        for port, tag in self.listen_ports:
            if tag not in SERVICE_TAGS:
                raise ConfigError(f"profile {self.name!r}: unknown service tag {tag!r} on port {port}")
            if not 0 < port < 65536 or port == ECHO_PORT:
                raise ConfigError(f"profile {self.name!r}: invalid listen port {port}")
            if port in seen:
                raise ConfigError(f"profile {self.name!r}: duplicate listen port {port}")
            seen.add(port)
        if self.toggle_enabled:
            lo, hi = TOGGLE_FREQ_RANGE
            f = self.idle_toggle_frequency
            if not lo <= f <= hi:
                warnings.warn(
                    f"profile {self.name!r}: idle toggle frequency {f:.1f} Hz outside [{lo:g}, {hi:g}] Hz",
                    ConfigWarning, stacklevel=2)


@dataclass(frozen=True)
class CycleRecord:
    cycle_index: int
    start: float
    duration: float
    msgs_processed: int
    msgs_dropped: int


@dataclass(frozen=True)
class DeviceState:
    mode: Mode
    cycle_count: int
    queue_len: int
    open_conns: int
    outputs: tuple[int, ...]
    inputs: tuple[int, ...]
    overload_streak: int
    sim_time: float


# reply(response_bytes_or_None, reply_time_us)
ReplyFn = Callable[[Optional[bytes], float], None]
# handler(device, payload) -> response bytes or None
ServiceFn = Callable[["Device", bytes], Optional[bytes]]
# framer(sock_file_like_recv) splits a byte stream into messages
FramerFn = Callable[[bytearray], Optional[bytes]]


@dataclass
class Message:
    payload: bytes
    port: int | None = None
    conn_id: int | None = None
    arrived_at: float = 0.0
    reply: ReplyFn | None = None


def _discard(device: "Device", payload: bytes) -> None:
    return None


def _echo(device: "Device", payload: bytes) -> bytes:
    return payload


def chunk_framer(buf: bytearray) -> bytes | None:
    """Treat whatever has arrived as one message."""
    if not buf:
        return None
    out = bytes(buf)
    buf.clear()
    return out


@dataclass
class _Service:
    handler: ServiceFn
    framer: FramerFn = chunk_framer


@dataclass
class _Inflight:
    record: CycleRecord
    saturated: bool


class Device:
    """Handle to one simulated device. All public methods are thread-safe."""

    def __init__(self, profile: DeviceProfile, clock: VirtualClock | RealClock,
                 *, driven: bool = True, host: str = "127.0.0.1", port_base: int = 10000,
                 ip: str = "192.168.0.10") -> None:
        profile.validate()
        self.profile = profile
        self.clock = clock
        self.driven = driven or not clock.is_virtual
        self.host = host
        self.port_base = port_base
        self.ip = ip  # address used in synthesized capture frames
        self.seed = profile.rng_seed
        self._lock = threading.RLock()
        self._rng = random.Random(self.seed)
        self._gen = 0
        self._conn_ids = itertools.count(1)

        self.mode = Mode.POWERED_OFF
        self.cycle_count = 0
        self.overload_streak = 0
        self.sim_time = clock.now
        self._queue: deque[Message] = deque()
        self._conns: set[int] = set()
        self._outputs = [0] * profile.output_channels
        self._inputs = [0] * profile.input_channels
        self._input_timeline: list[list[tuple[float, int, int]]] = [[] for _ in range(profile.input_channels)]
        self._input_seq = itertools.count()
        self._pending_outputs: dict[int, int] = {}
        self._dropped_since = 0
        self._inflight: _Inflight | None = None

        self.services: dict[int, _Service] = {ECHO_PORT: _Service(_echo)}
        for port, _tag in profile.listen_ports:
            self.services[port] = _Service(_discard)
        self.edge_listeners: list[Callable[[float, str, int], None]] = []
        self.cycle_listeners: list[Callable[[CycleRecord], None]] = []
        self.events: list[tuple[float, str]] = []

        self._net: _NetServer | None = None
        self._scan_thread: threading.Thread | None = None
        self._scan_stop = threading.Event()

    def __repr__(self) -> str:
        return f"<Device {self.name} {self.mode.value} cycles={self.cycle_count}>"

    @property
    def name(self) -> str:
        return self.profile.name

    def _now(self) -> float:
        return self.clock.now if self.driven else self.sim_time

    # -- services ---------------------------------------------------------

    def register_service(self, port: int, handler: ServiceFn, framer: FramerFn = chunk_framer) -> None:
        if port not in self.services:
            raise ConfigError(f"device {self.name!r} does not listen on port {port}")
        self.services[port] = _Service(handler, framer)

    def endpoint(self, port: int) -> tuple[str, int]:
        """Real-time address of a profile port (only while powered)."""
        if self._net is None:
            raise DeviceStateError(f"device {self.name!r} has no active listeners")
        return self.host, self._net.bound[port]

    # -- power ------------------------------------------------------------

    def power_on(self) -> None:
        with self._lock:
            if self.mode is not Mode.POWERED_OFF:
                return
            self._gen += 1
            self.mode = Mode.RUNNING
            self.cycle_count = 0
            self.overload_streak = 0
            self._dropped_since = 0
            self._inflight = None
            self._rng = random.Random(self.seed)
            self.sim_time = self._now()
            self.events.append((self.sim_time, "power_on"))
            if self.clock.is_virtual:
                if self.driven:
                    self.clock.schedule(self.sim_time, self._tick, self._gen, priority=PRIO_CYCLE)
                return
        self._start_realtime()

    def power_off(self) -> None:
        self._stop_realtime()
        with self._lock:
            if self.mode is Mode.POWERED_OFF:
                return
            self._gen += 1
            t = self._now()
            self.mode = Mode.POWERED_OFF
            self._queue.clear()
            self._conns.clear()
            self._pending_outputs.clear()
            self._inflight = None
            self.sim_time = t
            for ch, level in enumerate(self._outputs):
                if level:
                    self._outputs[ch] = 0
                    self._emit_edge(t, f"q{ch}", 0)
            self.events.append((t, "power_off"))

    def power_cycle(self) -> None:
        self.power_off()
        self.power_on()

    # -- communication part -------------------------------------------------

    def deliver_message(self, payload: bytes, conn_id: int | None = None, *,
                        port: int | None = None, reply: ReplyFn | None = None) -> Delivery:
        with self._lock:
            if self.mode is Mode.POWERED_OFF:
                return Delivery.DROPPED_OFF
            if self.mode is Mode.NET_STACK_CRASHED:
                return Delivery.DROPPED_CRASHED
            if len(self._queue) >= self.profile.buffer_cap:
                self._dropped_since += 1
                return Delivery.DROPPED_OVERFLOW
            self._queue.append(Message(bytes(payload), port, conn_id, self._now(), reply))
            return Delivery.ENQUEUED

    def open_connection(self) -> int | None:
        """Claim a connection slot; None when refused."""
        with self._lock:
            if self.mode is not Mode.RUNNING or len(self._conns) >= self.profile.conn_max:
                return None
            cid = next(self._conn_ids)
            self._conns.add(cid)
            return cid

    def close_connection(self, conn_id: int) -> None:
        with self._lock:
            self._conns.discard(conn_id)

    def has_port(self, port: int) -> bool:
        return port in self.services

    # -- inputs ---------------------------------------------------------------

    def set_input(self, channel: int, level: int, at: float | None = None) -> None:
        if not 0 <= channel < self.profile.input_channels:
            raise IndexError(f"input channel {channel} out of range for {self.name!r}")
        level = 1 if level else 0
        with self._lock:
            t = self._now() if at is None else float(at)
            timeline = self._input_timeline[channel]
            if self._input_level_at(channel, t) == level:
                return
            bisect.insort(timeline, (t, next(self._input_seq), level))
            self._emit_edge(t, f"i{channel}", level)

    def input_level(self, channel: int, at: float | None = None) -> int:
        """Electrical level driven onto an input at time `at` (default now)."""
        with self._lock:
            return self._input_level_at(channel, self._now() if at is None else at)

    def _input_level_at(self, channel: int, t: float) -> int:
        timeline = self._input_timeline[channel]
        i = bisect.bisect_right(timeline, (t, float("inf"), 1))
        return timeline[i - 1][2] if i else 0

    # -- control part ---------------------------------------------------------

    def step_cycle(self) -> CycleRecord:
        """Run one complete scan cycle immediately (undriven virtual devices only)."""
        with self._lock:
            if self.driven:
                raise DeviceStateError(f"device {self.name!r} is driven by its clock; step_cycle is manual-only")
            if self.mode is Mode.POWERED_OFF:
                raise DeviceStateError(f"device {self.name!r} is powered off")
            self._begin_cycle(self.sim_time)
            return self._end_cycle()

    def _tick(self, gen: int) -> None:
        with self._lock:
            if gen != self._gen or self.mode is Mode.POWERED_OFF:
                return
            if self._inflight is not None:
                self._end_cycle()
            inflight = self._begin_cycle(self.clock.now)
            self.clock.schedule(inflight.record.start + inflight.record.duration, self._tick, gen,
                                priority=PRIO_CYCLE)

    def _begin_cycle(self, start: float) -> _Inflight:
        p = self.profile
        self.sim_time = start
        for ch in range(p.input_channels):
            self._inputs[ch] = self._input_level_at(ch, start)
            self._prune_inputs(ch, start)
        saturated = len(self._queue) >= p.buffer_cap
        n = min(len(self._queue), p.q_max)
        msgs = [self._queue.popleft() for _ in range(n)]
        housekeeping = self._rng.uniform(0.0, p.h_max) if p.h_max > 0 else 0.0
        duration = p.t_exec + housekeeping + p.c_pkt * n
        for i, msg in enumerate(msgs):
            service = self.services.get(msg.port) if msg.port is not None else None
            response = service.handler(self, msg.payload) if service else None
            if msg.reply is not None:
                self._emit(start + p.c_pkt * (i + 1), msg.reply, response)
        record = CycleRecord(self.cycle_count, start, duration, n, self._dropped_since)
        self._dropped_since = 0
        self._inflight = _Inflight(record, saturated)
        return self._inflight

    def _end_cycle(self, t_end: float | None = None) -> CycleRecord:
        p = self.profile
        inflight, self._inflight = self._inflight, None
        assert inflight is not None
        record = inflight.record
        if t_end is None:
            t_end = record.start + record.duration
        self.sim_time = t_end
        new = list(self._outputs)
        if p.toggle_enabled:
            new[0] ^= 1
        if p.output_channels >= 2 and p.input_channels >= 1:
            new[1] = self._inputs[0]
        for ch, level in self._pending_outputs.items():
            new[ch] = level
        self._pending_outputs.clear()
        for ch, (old, level) in enumerate(zip(self._outputs, new)):
            if old != level:
                self._emit_edge(t_end, f"q{ch}", level)
        self._outputs = new
        self.cycle_count += 1
        self.overload_streak = self.overload_streak + 1 if inflight.saturated else 0
        limit = p.crash_overload_cycles
        if limit > 0 and self.overload_streak >= limit and self.mode is Mode.RUNNING:
            self._crash(t_end)
        for listener in self.cycle_listeners:
            listener(record)
        return record

    def _crash(self, t: float) -> None:
        log.info("%s: network stack crashed at %.1f us", self.name, t)
        self.mode = Mode.NET_STACK_CRASHED
        self._queue.clear()
        self._conns.clear()
        self.events.append((t, "crash"))
        if self._net is not None:
            self._net.drop_connections()

    def _prune_inputs(self, ch: int, t: float) -> None:
        timeline = self._input_timeline[ch]
        i = bisect.bisect_right(timeline, (t, float("inf"), 1))
        if i > 1:
            del timeline[: i - 1]

    def command_output(self, channel: int, level: int) -> None:
        """Latch an output value to be written at the end of the current cycle."""
        if not 0 <= channel < self.profile.output_channels:
            raise IndexError(f"output channel {channel} out of range for {self.name!r}")
        with self._lock:
            self._pending_outputs[channel] = 1 if level else 0

    def _emit(self, at: float, fn: ReplyFn, response: bytes | None) -> None:
        if self.clock.is_virtual and self.driven:
            gen = self._gen

            def fire() -> None:
                if gen == self._gen:
                    fn(response, at)
            self.clock.schedule(at, fire, priority=PRIO_CONTROL)
        else:
            fn(response, at)

    def _emit_edge(self, t: float, label: str, level: int) -> None:
        for listener in self.edge_listeners:
            listener(t, label, level)

    # -- observation ------------------------------------------------------------

    def read_state(self) -> DeviceState:
        with self._lock:
            return DeviceState(
                mode=self.mode,
                cycle_count=self.cycle_count,
                queue_len=len(self._queue),
                open_conns=len(self._conns),
                outputs=tuple(self._outputs),
                inputs=tuple(self._inputs),
                overload_streak=self.overload_streak,
                sim_time=self.sim_time,
            )

    @property
    def outputs(self) -> tuple[int, ...]:
        with self._lock:
            return tuple(self._outputs)

    @property
    def inputs(self) -> tuple[int, ...]:
        with self._lock:
            return tuple(self._inputs)

    # -- real-time mode -----------------------------------------------------------

    def _start_realtime(self) -> None:
        net = _NetServer(self)
        try:
            net.start()
        except OSError as exc:
            with self._lock:
                self.mode = Mode.POWERED_OFF
            raise StartupError(f"device {self.name!r}: cannot bind listeners: {exc}") from exc
        self._net = net
        self._scan_stop = threading.Event()
        self._scan_thread = threading.Thread(target=self._scan_loop, args=(self._scan_stop,),
                                             name=f"scan-{self.name}", daemon=True)
        self._scan_thread.start()

    def _stop_realtime(self) -> None:
        if self._scan_thread is not None:
            self._scan_stop.set()
            self._scan_thread.join()
            self._scan_thread = None
        if self._net is not None:
            self._net.stop()
            self._net = None

    def _scan_loop(self, stop: threading.Event) -> None:
        clock = self.clock
        assert isinstance(clock, RealClock)
        while not stop.is_set():
            with self._lock:
                inflight = self._begin_cycle(clock.now)
            end = inflight.record.start + inflight.record.duration
            if not clock.sleep_until(end, stop):
                return
            with self._lock:
                # edges carry wall-clock time in real-time mode
                self._end_cycle(clock.now)


def spawn_device(profile: DeviceProfile, clock: VirtualClock | RealClock, **kwargs) -> Device:
    """Create a powered-off device bound to `clock`."""
    return Device(profile, clock, **kwargs)


class _NetServer:
    """TCP listeners for a real-time device: profile ports plus the echo port."""

    def __init__(self, device: Device) -> None:
        self.device = device
        self.bound: dict[int, int] = {}
        self._socks: list[socket.socket] = []
        self._conns: dict[int, socket.socket] = {}
        self._conn_lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def _actual_port(self, port: int) -> int:
        base = self.device.port_base
        return 0 if base == 0 else base + port

    def start(self) -> None:
        ports = [ECHO_PORT] + self.device.profile.ports()
        try:
            for port in ports:
                s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
                s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                self._socks.append(s)
                s.bind((self.device.host, self._actual_port(port)))
                s.listen(64)
                s.settimeout(0.1)
                self.bound[port] = s.getsockname()[1]
        except OSError:
            self.stop()
            raise
        for port, s in zip(ports, self._socks):
            t = threading.Thread(target=self._accept_loop, args=(port, s), daemon=True,
                                 name=f"accept-{self.device.name}-{port}")
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        for s in self._socks:
            s.close()
        self.drop_connections()
        for t in self._threads:
            t.join(timeout=2)
        self._socks.clear()

    def drop_connections(self) -> None:
        with self._conn_lock:
            conns = list(self._conns.values())
            self._conns.clear()
        for c in conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            c.close()

    def _accept_loop(self, port: int, srv: socket.socket) -> None:
        while not self._stop.is_set():
            try:
                conn, _addr = srv.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            t = threading.Thread(target=self._serve_conn, args=(port, conn), daemon=True)
            t.start()

    def _serve_conn(self, port: int, conn: socket.socket) -> None:
        dev = self.device
        crashed = dev.mode is Mode.NET_STACK_CRASHED
        cid = None if crashed else dev.open_connection()
        if cid is None and not crashed:
            conn.close()
            return
        key = cid if cid is not None else -id(conn)
        with self._conn_lock:
            self._conns[key] = conn
        conn.settimeout(0.2)
        buf = bytearray()
        try:
            while not self._stop.is_set():
                try:
                    chunk = conn.recv(4096)
                except socket.timeout:
                    continue
                if not chunk:
                    break
                if cid is None:
                    continue  # silent while the stack is down
                buf.extend(chunk)
                framer = dev.services[port].framer
                while (msg := framer(buf)) is not None:
                    done = threading.Event()
                    box: list[bytes | None] = [None]

                    def reply(resp: bytes | None, _t: float, box=box, done=done) -> None:
                        box[0] = resp
                        done.set()

                    if not dev.deliver_message(msg, cid, port=port, reply=reply).accepted:
                        continue
                    while not done.wait(0.1):
                        if self._stop.is_set() or dev.mode is not Mode.RUNNING:
                            break
                    if done.is_set() and box[0] is not None:
                        conn.sendall(box[0])
        except OSError:
            pass
        finally:
            with self._conn_lock:
                self._conns.pop(key, None)
            if cid is not None:
                dev.close_connection(cid)
            try:
                conn.close()
            except OSError:
                pass
