"""Reachability monitor.

Every ``interval`` each target receives a liveness probe on its echo port.
The probe is an ordinary queued message, so probing costs the device cycle
time like any other traffic. A reply later than ``timeout`` counts as a
timeout.
"""

from __future__ import annotations

import csv
import math
import socket
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .clock import PRIO_OBSERVE, RealClock, VirtualClock
from .device_sim import ECHO_PORT, ConfigError, Device, DeviceStateError

PROBE_PAYLOAD = b"icsbench"
MEASUREMENT_ADDR = "192.168.0.250"


@dataclass(frozen=True)
class ProbeConfig:
    interval: float = 100_000.0  # us
    timeout: float = 50_000.0  # us
    unreachable_after: int = 3

    def __post_init__(self) -> None:
        if not 0 < self.timeout < self.interval:
            raise ConfigError("probe timeout must be > 0 and < interval")
        if self.unreachable_after < 1:
            raise ConfigError("unreachable_after must be >= 1")


@dataclass(frozen=True)
class ProbeRecord:
    target: str
    sent_at: float
    rtt: float | None  # None = timeout

    @property
    def ok(self) -> bool:
        return self.rtt is not None


class Prober:
    """Drives probes for all targets on a shared tick."""

    def __init__(self, targets: Sequence[Device], config: ProbeConfig,
                 clock: VirtualClock | RealClock, capture=None, *, src_addr: str = MEASUREMENT_ADDR) -> None:
        if not targets:
            raise ConfigError("probe needs at least one target")
        self.targets = list(targets)
        self.config = config
        self.clock = clock
        self.capture = capture
        self.src_addr = src_addr
        self.records: list[ProbeRecord] = []
        self._pending: dict[int, tuple[str, float]] = {}
        self._lock = threading.Lock()
        self._seq = 0
        self._running = False
        self._tick_handle = None
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self._workers: list[threading.Thread] = []

    def start(self) -> None:
        self._running = True
        if self.clock.is_virtual:
            self._tick_handle = self.clock.schedule(self.clock.now, self._tick, priority=PRIO_OBSERVE)
        else:
            self._thread = threading.Thread(target=self._realtime_loop, daemon=True, name="prober")
            self._thread.start()

    def stop(self) -> list[ProbeRecord]:
        """Stop sending and wait for in-flight probes to resolve."""
        self._running = False
        if self.clock.is_virtual:
            if self._tick_handle is not None:
                self._tick_handle.cancel()
            last = max((sent for _, sent in self._pending.values()), default=None)
            if last is not None:
                self.clock.run_until(last + self.config.timeout)
        else:
            self._stop.set()
            if self._thread is not None:
                self._thread.join()
            for w in self._workers:
                w.join()
        with self._lock:
            for key, (target, sent) in sorted(self._pending.items()):
                self._resolve(key, None)
        self.records.sort(key=lambda r: (r.sent_at, self._order(r.target)))
        return list(self.records)

    def _order(self, name: str) -> int:
        return next(i for i, d in enumerate(self.targets) if d.name == name)

    def _resolve(self, key: int, rtt: float | None) -> None:
        entry = self._pending.pop(key, None)
        if entry is None:
            return
        target, sent = entry
        if rtt is not None and rtt > self.config.timeout:
            rtt = None
        self.records.append(ProbeRecord(target, sent, rtt))

    def _capture(self, device: Device, t: float, payload: bytes, to_device: bool) -> None:
        if self.capture is not None:
            self.capture.record_exchange(t, self.src_addr, device, ECHO_PORT, payload, to_device)

    # virtual mode

    def _tick(self) -> None:
        if not self._running:
            return
        now = self.clock.now
        for dev in self.targets:
            key = self._seq
            self._seq += 1
            self._pending[key] = (dev.name, now)
            self._capture(dev, now, PROBE_PAYLOAD, True)

            def on_reply(resp: bytes | None, t: float, key=key, dev=dev, sent=now) -> None:
                if resp is not None and key in self._pending:
                    self._capture(dev, t, resp, False)
                    self._resolve(key, t - sent)

            delivered = dev.deliver_message(PROBE_PAYLOAD, port=ECHO_PORT, reply=on_reply)
            deadline = now + self.config.timeout
            if not delivered.accepted:
                self.clock.schedule(deadline, self._resolve, key, None, priority=PRIO_OBSERVE)
            else:
                self.clock.schedule(deadline, self._expire, key, priority=PRIO_OBSERVE)
        self._tick_handle = self.clock.schedule(now + self.config.interval, self._tick, priority=PRIO_OBSERVE)

    def _expire(self, key: int) -> None:
        self._resolve(key, None)

    # real-time mode

    def _realtime_loop(self) -> None:
        clock = self.clock
        assert isinstance(clock, RealClock)
        next_at = clock.now
        while self._running:
            if not clock.sleep_until(next_at, self._stop):
                return
            sent = clock.now
            for dev in self.targets:
                with self._lock:
                    key = self._seq
                    self._seq += 1
                    self._pending[key] = (dev.name, sent)
                w = threading.Thread(target=self._probe_once, args=(key, dev, sent), daemon=True)
                w.start()
                self._workers.append(w)
            self._workers = [w for w in self._workers if w.is_alive()]
            next_at += self.config.interval

    def _probe_once(self, key: int, dev: Device, sent: float) -> None:
        timeout_s = self.config.timeout / 1e6
        rtt = None
        try:
            addr = dev.endpoint(ECHO_PORT)
            self._capture(dev, sent, PROBE_PAYLOAD, True)
            with socket.create_connection(addr, timeout=timeout_s) as s:
                s.settimeout(max(timeout_s - (self.clock.now - sent) / 1e6, 1e-3))
                s.sendall(PROBE_PAYLOAD)
                got = b""
                while len(got) < len(PROBE_PAYLOAD):
                    chunk = s.recv(64)
                    if not chunk:
                        break
                    got += chunk
                if got == PROBE_PAYLOAD:
                    rtt = self.clock.now - sent
                    self._capture(dev, sent + rtt, got, False)
        except (OSError, DeviceStateError):
            rtt = None
        with self._lock:
            self._resolve(key, rtt)


def run_probe(targets: Iterable[Device | str], config: ProbeConfig, clock: VirtualClock | RealClock,
              duration: float, *, registry: Mapping[str, Device] | None = None,
              capture=None) -> list[ProbeRecord]:
    """Probe all targets for `duration` microseconds and return the records."""
    resolved = []
    for t in targets:
        if isinstance(t, str):
            if registry is None or t not in registry:
                raise ConfigError(f"unknown probe target {t!r}")
            t = registry[t]
        resolved.append(t)
    prober = Prober(resolved, config, clock, capture)
    prober.start()
    end = clock.now + duration
    if isinstance(clock, VirtualClock):
        # last tick strictly before `end`
        clock.run_until(end - 1e-6)
        prober._running = False
        clock.run_until(end)
    else:
        clock.sleep(duration)
    return prober.stop()


# -- summaries ----------------------------------------------------------------------


@dataclass
class TargetReachability:
    target: str
    first_sent: float
    end: float  # last sent_at + interval
    intervals: list[tuple[float, float | None]] = field(default_factory=list)
    records: int = 0
    timeouts: int = 0
    rtt_count: int = 0
    rtt_sum: float = 0.0
    rtt_min: float | None = None
    rtt_max: float | None = None
    # stitching state for merges
    lead_timeouts: int = 0
    first_success: float | None = None
    trail_timeouts: int = 0
    trail_start: float | None = None

    @property
    def observed(self) -> float:
        return self.end - self.first_sent

    @property
    def unreachable_time(self) -> float:
        return sum((self.end if e is None else e) - s for s, e in self.intervals)

    @property
    def uptime(self) -> float:
        return 1.0 - self.unreachable_time / self.observed if self.observed > 0 else 1.0

    @property
    def rtt_mean(self) -> float | None:
        return self.rtt_sum / self.rtt_count if self.rtt_count else None


def _summarize_target(name: str, recs: list[ProbeRecord], config: ProbeConfig) -> TargetReachability:
    n = config.unreachable_after
    s = TargetReachability(name, recs[0].sent_at, recs[-1].sent_at + config.interval)
    streak, streak_start = 0, None
    rtts = []
    for r in recs:
        s.records += 1
        if r.ok:
            rtts.append(r.rtt)
            if streak >= n:
                s.intervals[-1] = (streak_start, r.sent_at)
            if s.first_success is None:
                s.first_success = r.sent_at
                s.lead_timeouts = streak
            streak, streak_start = 0, None
        else:
            s.timeouts += 1
            if streak == 0:
                streak_start = r.sent_at
            streak += 1
            if streak == n:
                s.intervals.append((streak_start, None))
    if s.first_success is None:
        s.lead_timeouts = streak
    s.trail_timeouts, s.trail_start = streak, streak_start
    if rtts:
        s.rtt_count, s.rtt_sum = len(rtts), math.fsum(rtts)
        s.rtt_min, s.rtt_max = min(rtts), max(rtts)
    return s


def reachability_summary(records: Iterable[ProbeRecord], config: ProbeConfig) -> dict[str, TargetReachability]:
    """Per-target uptime and unreachable intervals.

    An interval opens at the first of ``unreachable_after`` consecutive
    timeouts and closes at the next successful probe (end None while open).
    """
    by_target: dict[str, list[ProbeRecord]] = {}
    for r in records:
        by_target.setdefault(r.target, []).append(r)
    return {name: _summarize_target(name, recs, config) for name, recs in by_target.items()}


def merge_reachability(a: TargetReachability, b: TargetReachability, config: ProbeConfig) -> TargetReachability:
    """Combine summaries of two adjacent record spans of one target."""
    n = config.unreachable_after
    a_int, b_int = list(a.intervals), list(b.intervals)
    combined = a.trail_timeouts + b.lead_timeouts
    if combined >= n and (a.trail_timeouts or b.lead_timeouts):
        start = a.trail_start if a.trail_timeouts else b.first_sent
        if a.trail_timeouts >= n:
            a_int.pop()
        if b.lead_timeouts >= n:
            b_int.pop(0)
        a_int.append((start, b.first_success))
    out = replace(
        a,
        end=b.end,
        intervals=a_int + b_int,
        records=a.records + b.records,
        timeouts=a.timeouts + b.timeouts,
        rtt_count=a.rtt_count + b.rtt_count,
        rtt_sum=math.fsum([a.rtt_sum, b.rtt_sum]),
        rtt_min=min((x for x in (a.rtt_min, b.rtt_min) if x is not None), default=None),
        rtt_max=max((x for x in (a.rtt_max, b.rtt_max) if x is not None), default=None),
    )
    if a.first_success is None:
        out.lead_timeouts = a.lead_timeouts + b.lead_timeouts
        out.first_success = b.first_success
    if b.first_success is not None:
        out.trail_timeouts, out.trail_start = b.trail_timeouts, b.trail_start
    else:
        out.trail_timeouts = a.trail_timeouts + b.trail_timeouts
        out.trail_start = a.trail_start if a.trail_timeouts else b.first_sent
    return out


def detection_time(records: Sequence[ProbeRecord], target: str, after: float, config: ProbeConfig) -> float | None:
    """Instant an outage beginning at `after` is confirmed: the deadline of
    the ``unreachable_after``-th consecutive timeout sent at or after it."""
    streak = 0
    for r in records:
        if r.target != target or r.sent_at < after - config.interval:
            continue
        if r.ok:
            streak = 0
            continue
        streak += 1
        if streak == config.unreachable_after:
            return r.sent_at + config.timeout
    return None


# -- probe log CSV ---------------------------------------------------------------------


def write_probe_log(records: Iterable[ProbeRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sent_at_us", "target", "rtt_us_or_TIMEOUT"])
        for r in records:
            w.writerow([f"{r.sent_at:.3f}", r.target, "TIMEOUT" if r.rtt is None else f"{r.rtt:.3f}"])


def read_probe_log(path: str | Path) -> list[ProbeRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["sent_at_us", "target", "rtt_us_or_TIMEOUT"]:
            raise ValueError(f"{path}: bad probe log header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields")
            rtt = None if row[2] == "TIMEOUT" else float(row[2])
            out.append(ProbeRecord(row[1], float(row[0]), rtt))
    return out
