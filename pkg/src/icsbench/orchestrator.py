"""Scenario loading and the automated test sequence.

One sequence walks a fixed chain of states::

    Start -> PowerCycle -> BeginMeasurement -> PreIdle -> Attack -> PostIdle
          -> EndMeasurement -> Analyze -> (Start | Done)

and leaves its artifacts in ``output_dir/test_<n>/``.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import random
import re
import threading
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable

import yaml

from . import attacks as atk
from .artifacts import ATTACK_FILE, PROBES_FILE, REPORT_STEM, TRACE_FILE, RunArtifacts
from .capture import RotationPolicy, open_capture
from .clock import PRIO_CONTROL, PRIO_OBSERVE, RealClock, VirtualClock
from .device_sim import ConfigError, Device, DeviceProfile, spawn_device
from .probe import ProbeConfig, Prober, write_probe_log
from .profiles import get_preset
from .protocol import handle_request, mbap_framer
from .report import ComparisonReport, Thresholds, compare, emit
from .signal import DEFAULT_SAMPLE_RATE, Sampler, export_trace

log = logging.getLogger(__name__)

DEFAULT_IDLE = 10e6  # us


class ScenarioError(ConfigError):
    def __init__(self, msg: str, line: int | None = None, key: str | None = None) -> None:
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{msg}")
        self.line = line
        self.key = key


class SequenceState(enum.Enum):
    START = "Start"
    POWER_CYCLE = "PowerCycle"
    BEGIN_MEASUREMENT = "BeginMeasurement"
    PRE_IDLE = "PreIdle"
    ATTACK = "Attack"
    POST_IDLE = "PostIdle"
    END_MEASUREMENT = "EndMeasurement"
    ANALYZE = "Analyze"
    DONE = "Done"


S = SequenceState
CHAIN = (S.START, S.POWER_CYCLE, S.BEGIN_MEASUREMENT, S.PRE_IDLE, S.ATTACK, S.POST_IDLE,
         S.END_MEASUREMENT, S.ANALYZE)
NEXT = {a: b for a, b in zip(CHAIN, CHAIN[1:])}


def legal_transition(a: SequenceState, b: SequenceState) -> bool:
    if a is S.ANALYZE:
        return b in (S.START, S.DONE)
    return NEXT.get(a) is b


# -- scenario ---------------------------------------------------------------------


@dataclass(frozen=True)
class FleetEntry:
    profile: DeviceProfile
    ip: str


@dataclass(frozen=True)
class Phases:
    pre_idle: float = DEFAULT_IDLE
    attack: float = DEFAULT_IDLE
    post_idle: float = DEFAULT_IDLE


@dataclass(frozen=True)
class Scenario:
    fleet: tuple[FleetEntry, ...]
    tests: tuple[atk.AttackSpec, ...] = ()
    phases: Phases = Phases()
    probe_config: ProbeConfig = ProbeConfig()
    sample_rate: float = DEFAULT_SAMPLE_RATE
    rotation: RotationPolicy = RotationPolicy()
    clock_mode: str = "virtual"
    master_seed: int = 0
    power_cycle_between_tests: bool = True
    output_dir: str = "out"
    # extensions beyond the core fields
    recovery_power_cycle: bool = False
    stimulus_period: float | None = None  # us between input edges
    thresholds: Thresholds = Thresholds()
    report_formats: tuple[str, ...] = ("csv", "svg", "text")
    port_base: int = 0  # real-time listeners; 0 = ephemeral ports

    def device_names(self) -> list[str]:
        return [f.profile.name for f in self.fleet]

    def expanded_tests(self) -> list[atk.AttackSpec]:
        """Tests in run order, with target ``all`` expanded over the fleet."""
        out = []
        for spec in self.tests:
            if spec.target == "all":
                out += [replace(spec, target=name) for name in self.device_names()]
            else:
                out.append(spec)
        return out


_UNIT = {"us": 1.0, "µs": 1.0, "ms": 1e3, "s": 1e6, "min": 60e6}
_HZ = {"hz": 1.0, "khz": 1e3, "mhz": 1e6}
_NUM_UNIT = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([a-zA-Zµ]*)\s*$")


def parse_duration(value: Any) -> float:
    """Microseconds from a number (already us) or a string like '10s', '100 ms'."""
    if isinstance(value, bool):
        raise ValueError(f"bad duration {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    m = _NUM_UNIT.match(str(value))
    if not m or m.group(2) not in _UNIT:
        raise ValueError(f"bad duration {value!r} (use us, ms, s or min)")
    return float(m.group(1)) * _UNIT[m.group(2)]


def parse_rate(value: Any) -> float:
    """Hz from a number or a string like '1MHz'."""
    if isinstance(value, bool):
        raise ValueError(f"bad rate {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    m = _NUM_UNIT.match(str(value))
    if not m or m.group(2).lower() not in _HZ:
        raise ValueError(f"bad rate {value!r} (use Hz, kHz or MHz)")
    return float(m.group(1)) * _HZ[m.group(2).lower()]


class _LineLoader(yaml.SafeLoader):
    """Safe loader whose mappings remember the line of every key."""


class _LineDict(dict):
    line: int = 0
    lines: dict


class _LineList(list):
    line: int = 0
    lines: list


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = _LineDict()
    out.line = node.start_mark.line + 1
    out.lines = {}
    for k_node, v_node in node.value:
        key = loader.construct_object(k_node, deep=True)
        if key in out:
            raise ScenarioError(f"duplicate key {key!r}", k_node.start_mark.line + 1, str(key))
        out[key] = loader.construct_object(v_node, deep=True)
        out.lines[key] = k_node.start_mark.line + 1
    return out


def _construct_sequence(loader, node):
    out = _LineList(loader.construct_object(n, deep=True) for n in node.value)
    out.line = node.start_mark.line + 1
    out.lines = [n.start_mark.line + 1 for n in node.value]
    return out


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)
_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_SEQUENCE_TAG, _construct_sequence)


class _Section:
    """Typed, line-aware reads from one mapping; tracks consumed keys."""

    def __init__(self, data: Any, where: str, line: int | None) -> None:
        if not isinstance(data, dict):
            raise ScenarioError(f"{where} must be a mapping", line, where)
        self.data = data
        self.where = where
        self.lines = getattr(data, "lines", {})
        self.line = getattr(data, "line", line)

    def line_of(self, key: str) -> int | None:
        return self.lines.get(key, self.line)

    def has(self, key: str) -> bool:
        return key in self.data

    def get(self, key: str, conv: Callable[[Any], Any] | None = None, default: Any = None,
            required: bool = False) -> Any:
        path = f"{self.where}.{key}" if self.where else key
        if key not in self.data:
            if required:
                raise ScenarioError(f"missing required key {path!r}", self.line, path)
            return default
        value = self.data[key]
        if conv is None:
            return value
        try:
            return conv(value)
        except ScenarioError:
            raise
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"{path}: {exc}", self.line_of(key), path) from None

    def sub(self, key: str) -> _Section:
        path = f"{self.where}.{key}" if self.where else key
        return _Section(self.data.get(key, {}) or {}, path, self.line_of(key))

    def reject_unknown(self, allowed: set[str]) -> None:
        for key in self.data:
            if key not in allowed:
                path = f"{self.where}.{key}" if self.where else str(key)
                raise ScenarioError(f"unknown key {path!r}", self.line_of(key), path)


def _int(v: Any) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"expected an integer, got {v!r}")
    return v


def _bool(v: Any) -> bool:
    if not isinstance(v, bool):
        raise ValueError(f"expected true/false, got {v!r}")
    return v


def _str(v: Any) -> str:
    if not isinstance(v, str) or not v:
        raise ValueError(f"expected a non-empty string, got {v!r}")
    return v


def _number(v: Any) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"expected a number, got {v!r}")
    return float(v)


def _ports(v: Any) -> tuple[tuple[int, str], ...]:
    if not isinstance(v, list):
        raise ValueError("expected a list of ports")
    out = []
    for item in v:
        if isinstance(item, int) and not isinstance(item, bool):
            out.append((item, "modbus" if item == 502 else "stub"))
        elif isinstance(item, list) and len(item) == 2:
            out.append((_int(item[0]), _str(item[1])))
        elif isinstance(item, dict) and set(item) <= {"port", "service"} and "port" in item:
            port = _int(item["port"])
            out.append((port, _str(item.get("service", "modbus" if port == 502 else "stub"))))
        else:
            raise ValueError(f"bad port entry {item!r}; use 502, [502, modbus] or {{port: 502, service: modbus}}")
    return tuple(out)


_PROFILE_KEYS = {
    "vendor_label": _str, "product_label": _str, "listen_ports": _ports,
    "t_exec": parse_duration, "h_max": parse_duration, "c_pkt": parse_duration,
    "q_max": _int, "buffer_cap": _int, "conn_max": _int, "crash_overload_cycles": _int,
    "output_channels": _int, "input_channels": _int, "toggle_enabled": _bool, "rng_seed": _int,
}


def _fleet_entry(sec: _Section, index: int) -> FleetEntry:
    sec.reject_unknown({"name", "preset", "ip", "extra_ports", *_PROFILE_KEYS})
    name = sec.get("name", _str, required=True)
    preset_key = sec.get("preset", _str)
    if preset_key is not None:
        try:
            preset = get_preset(preset_key)
        except KeyError as exc:
            raise ScenarioError(str(exc.args[0]), sec.line_of("preset"), f"{sec.where}.preset") from None
        base, ip = preset.profile, preset.ip
    else:
        base, ip = DeviceProfile(name=name), f"192.168.0.{10 + index}"
    overrides = {k: sec.get(k, conv) for k, conv in _PROFILE_KEYS.items() if sec.has(k)}
    extra = sec.get("extra_ports", _ports, default=())
    if extra:
        overrides["listen_ports"] = tuple(overrides.get("listen_ports", base.listen_ports)) + extra
    profile = replace(base, name=name, **overrides)
    try:
        profile.validate()
    except ConfigError as exc:
        raise ScenarioError(str(exc), sec.line, sec.where) from None
    return FleetEntry(profile, sec.get("ip", _str, default=ip))


_ATTACK_TYPES = {"flood": atk.Flood, "conn_exhaust": atk.ConnExhaust, "fuzz": atk.Fuzz, "port_sweep": atk.PortSweep}
_ATTACK_KEYS = {
    "flood": {"rate": _number, "payload": _str, "junk_bytes": _int},
    "conn_exhaust": {"target_conns": _int, "hold": parse_duration},
    "fuzz": {"seed": _int, "iterations": _int, "mutators": lambda v: tuple(_str(x) for x in v),
             "base_frames": _str, "response_timeout": parse_duration},
    "port_sweep": {"ports": lambda v: tuple(_int(x) for x in v)},
}


def _test_entry(sec: _Section, attack_phase: float, names: list[str]) -> atk.AttackSpec:
    kind = sec.get("type", _str, required=True)
    if kind not in _ATTACK_TYPES:
        raise ScenarioError(f"{sec.where}.type: unknown attack type {kind!r} "
                            f"(one of {', '.join(_ATTACK_TYPES)})", sec.line_of("type"), f"{sec.where}.type")
    keys = _ATTACK_KEYS[kind]
    sec.reject_unknown({"type", "target", "duration", "port", *keys})
    target = sec.get("target", _str, required=True)
    if target != "all" and target not in names:
        raise ScenarioError(f"{sec.where}.target: {target!r} is not in the fleet", sec.line_of("target"),
                            f"{sec.where}.target")
    duration = sec.get("duration", parse_duration, default=attack_phase)
    if duration > attack_phase:
        raise ScenarioError(f"{sec.where}.duration exceeds the attack phase", sec.line_of("duration"),
                            f"{sec.where}.duration")
    kw = {k: sec.get(k, conv) for k, conv in keys.items() if sec.has(k)}
    try:
        return _ATTACK_TYPES[kind](target=target, duration=duration, port=sec.get("port", _int), **kw)
    except TypeError as exc:
        raise ScenarioError(f"{sec.where}: {exc}", sec.line, sec.where) from None
    except ConfigError as exc:
        raise ScenarioError(f"{sec.where}: {exc}", sec.line, sec.where) from None


_TOP_KEYS = {f.name for f in fields(Scenario)}


def parse_scenario(data: Any, base_dir: Path | None = None) -> Scenario:
    top = _Section(data, "", 1)
    top.reject_unknown(_TOP_KEYS)

    ph = top.sub("phases")
    ph.reject_unknown({"pre_idle", "attack", "post_idle"})
    phases = Phases(*(ph.get(k, parse_duration, DEFAULT_IDLE) for k in ("pre_idle", "attack", "post_idle")))
    for k in ("pre_idle", "attack", "post_idle"):
        if getattr(phases, k) <= 0:
            raise ScenarioError(f"phases.{k} must be > 0", ph.line_of(k), f"phases.{k}")

    fleet_raw = top.get("fleet", required=True)
    if not isinstance(fleet_raw, list) or not fleet_raw:
        raise ScenarioError("fleet must be a non-empty list", top.line_of("fleet"), "fleet")
    fleet, seen = [], set()
    for i, item in enumerate(fleet_raw):
        entry = _fleet_entry(_Section(item, f"fleet[{i}]", fleet_raw.lines[i]), i)
        if entry.profile.name in seen:
            raise ScenarioError(f"duplicate device name {entry.profile.name!r}", fleet_raw.lines[i], f"fleet[{i}].name")
        if entry.profile.name == "all":
            raise ScenarioError("device name 'all' is reserved", fleet_raw.lines[i], f"fleet[{i}].name")
        seen.add(entry.profile.name)
        fleet.append(entry)
    names = [f.profile.name for f in fleet]

    tests_raw = top.get("tests", default=[]) or []
    if not isinstance(tests_raw, list):
        raise ScenarioError("tests must be a list", top.line_of("tests"), "tests")
    lines = getattr(tests_raw, "lines", [None] * len(tests_raw))
    tests = tuple(_test_entry(_Section(t, f"tests[{i}]", lines[i]), phases.attack, names)
                  for i, t in enumerate(tests_raw))

    pc = top.sub("probe_config")
    pc.reject_unknown({"interval", "timeout", "unreachable_after"})
    defaults = ProbeConfig()
    try:
        probe = ProbeConfig(pc.get("interval", parse_duration, defaults.interval),
                            pc.get("timeout", parse_duration, defaults.timeout),
                            pc.get("unreachable_after", _int, defaults.unreachable_after))
    except ConfigError as exc:
        raise ScenarioError(f"probe_config: {exc}", pc.line, "probe_config") from None

    rot = top.sub("rotation")
    rot.reject_unknown({"max_bytes", "max_duration"})
    rd = RotationPolicy()
    try:
        rotation = RotationPolicy(rot.get("max_bytes", lambda v: v if v is None else _int(v), rd.max_bytes),
                                  rot.get("max_duration", lambda v: v if v is None else parse_duration(v),
                                          rd.max_duration))
    except ValueError as exc:
        raise ScenarioError(f"rotation: {exc}", rot.line, "rotation") from None

    th = top.sub("thresholds")
    th.reject_unknown({"theta_mean", "theta_max", "theta_rec"})
    thresholds = Thresholds(*(th.get(k, _number, getattr(Thresholds(), k))
                              for k in ("theta_mean", "theta_max", "theta_rec")))

    clock_mode = top.get("clock_mode", _str, "virtual")
    if clock_mode not in ("virtual", "realtime"):
        raise ScenarioError("clock_mode must be 'virtual' or 'realtime'", top.line_of("clock_mode"), "clock_mode")
    sample_rate = top.get("sample_rate", parse_rate, DEFAULT_SAMPLE_RATE)
    if not 0 < sample_rate <= 100e6:
        raise ScenarioError("sample_rate must be in (0, 100 MHz]", top.line_of("sample_rate"), "sample_rate")
    stim = top.get("stimulus_period", lambda v: None if v is None else parse_duration(v))
    if stim is not None and stim <= 0:
        raise ScenarioError("stimulus_period must be > 0", top.line_of("stimulus_period"), "stimulus_period")
    formats = top.get("report_formats", lambda v: tuple(_str(x) for x in v), ("csv", "svg", "text"))
    bad = set(formats) - {"csv", "svg", "text"}
    if bad:
        raise ScenarioError(f"unknown report formats {sorted(bad)}", top.line_of("report_formats"), "report_formats")

    output_dir = top.get("output_dir", _str, "out")
    if base_dir is not None and not Path(output_dir).is_absolute():
        output_dir = str(base_dir / output_dir)
    return Scenario(
        fleet=tuple(fleet), tests=tests, phases=phases, probe_config=probe, sample_rate=sample_rate,
        rotation=rotation, clock_mode=clock_mode, master_seed=top.get("master_seed", _int, 0),
        power_cycle_between_tests=top.get("power_cycle_between_tests", _bool, True),
        output_dir=output_dir, recovery_power_cycle=top.get("recovery_power_cycle", _bool, False),
        stimulus_period=stim, thresholds=thresholds, report_formats=formats,
        port_base=top.get("port_base", _int, 0),
    )


def load_scenario(path: str | Path) -> Scenario:
    """Load and validate a YAML scenario. Relative output_dir stays relative to the working directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scenario file {path} does not exist")
    try:
        data = yaml.load(path.read_text(), Loader=_LineLoader)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise ScenarioError(f"YAML syntax error: {exc.problem}", line) from None
    if data is None:
        raise ScenarioError("scenario file is empty", 1)
    return parse_scenario(data)


# -- sequence ---------------------------------------------------------------------


def derive_seed(master_seed: int, test_index: int) -> int:
    digest = hashlib.sha256(f"{master_seed}:{test_index}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


class Testbed:
    """Clock and devices shared by the sequences of one campaign."""

    def __init__(self, scenario: Scenario) -> None:
        self.scenario = scenario
        if scenario.clock_mode == "virtual":
            self.clock: VirtualClock | RealClock = VirtualClock()
            self.epoch_offset_us = 0
        else:
            self.clock = RealClock()
            self.epoch_offset_us = int(time.time() * 1e6)
        self.devices: dict[str, Device] = {}
        for entry in scenario.fleet:
            dev = spawn_device(entry.profile, self.clock, ip=entry.ip, port_base=scenario.port_base)
            for port in entry.profile.ports("modbus"):
                dev.register_service(port, handle_request, mbap_framer)
            self.devices[dev.name] = dev

    def shutdown(self) -> None:
        for dev in self.devices.values():
            dev.power_off()


class _Stimulus:
    """Alternating input-0 edges on the target, spaced by the stimulus period plus seeded jitter."""

    def __init__(self, device: Device, period: float, clock, rng: random.Random) -> None:
        self.device = device
        self.period = period
        self.clock = clock
        self.rng = rng
        self.level = device.input_level(0)
        self._handle = None
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _next_gap(self) -> float:
        return self.period + self.rng.uniform(0, self.period / 2)

    def start(self) -> None:
        if self.clock.is_virtual:
            self._handle = self.clock.schedule(self.clock.now + self._next_gap(), self._fire, priority=PRIO_OBSERVE)
        else:
            self._thread = threading.Thread(target=self._loop, daemon=True, name="stimulus")
            self._thread.start()

    def _flip(self, at: float) -> None:
        self.level ^= 1
        self.device.set_input(0, self.level, at=at)

    def _fire(self) -> None:
        self._flip(self.clock.now)
        self._handle = self.clock.schedule(self.clock.now + self._next_gap(), self._fire, priority=PRIO_OBSERVE)

    def _loop(self) -> None:
        t = self.clock.now
        while True:
            t += self._next_gap()
            if not self.clock.sleep_until(t, self._stop):
                return
            self._flip(self.clock.now)

    def stop(self) -> None:
        if self._handle is not None:
            self._handle.cancel()
        self._stop.set()
        if self._thread is not None:
            self._thread.join()


class _LiveStatus:
    """Writes ``live.json`` once per clock second for the ``watch`` command."""

    PERIOD = 1e6  # us

    def __init__(self, seq: _Sequence) -> None:
        self.seq = seq
        self.clock = seq.clock
        self.path = seq.art.file("live.json")
        self._window: list[float] = []
        self._handle = None
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()

    def on_cycle(self, record) -> None:
        with self._lock:
            self._window.append(record.duration)

    def start(self) -> None:
        self.seq.device.cycle_listeners.append(self.on_cycle)
        if self.clock.is_virtual:
            self._handle = self.clock.schedule(self.clock.now + self.PERIOD, self._fire, priority=PRIO_OBSERVE)
        else:
            self._thread = threading.Thread(target=self._loop, daemon=True, name="live-status")
            self._thread.start()

    def _fire(self) -> None:
        self.write()
        self._handle = self.clock.schedule(self.clock.now + self.PERIOD, self._fire, priority=PRIO_OBSERVE)

    def _loop(self) -> None:
        t = self.clock.now
        while True:
            t += self.PERIOD
            if not self.clock.sleep_until(t, self._stop):
                return
            self.write()

    def write(self) -> None:
        with self._lock:
            window, self._window = self._window, []
        prober = self.seq.prober
        last: dict[str, str] = {}
        if prober is not None:
            for r in list(prober.records)[-4 * len(prober.targets):]:
                last[r.target] = "timeout" if r.rtt is None else f"{r.rtt:.0f}us"
        state = self.seq.state.value if self.seq.state else None
        status = {"t_us": self.clock.now, "state": state, "probes": last, "cycles": len(window)}
        if window:
            status.update(cycle_mean=sum(window) / len(window), cycle_min=min(window), cycle_max=max(window))
        self.path.write_text(json.dumps(status, sort_keys=True) + "\n")

    def stop(self) -> None:
        if self._handle is not None:
            self._handle.cancel()
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        if self.on_cycle in self.seq.device.cycle_listeners:
            self.seq.device.cycle_listeners.remove(self.on_cycle)


class SequenceAborted(RuntimeError):
    pass


class _Sequence:
    def __init__(self, scenario: Scenario, test_index: int, spec: atk.AttackSpec, testbed: Testbed,
                 last: bool) -> None:
        self.scenario = scenario
        self.index = test_index
        self.spec = spec
        self.bed = testbed
        self.clock = testbed.clock
        self.last = last
        self.seed = derive_seed(scenario.master_seed, test_index)
        self.device = testbed.devices[spec.target]
        directory = Path(scenario.output_dir) / f"test_{test_index}"
        directory.mkdir(parents=True, exist_ok=True)
        for stale in directory.glob("capture-*.pcap"):
            stale.unlink()
        self.art = RunArtifacts(
            test_id=test_index, directory=str(directory), target=spec.target,
            attack={"type": spec.kind, **_spec_dict(spec)}, seed=self.seed,
            probe_config={"interval": scenario.probe_config.interval, "timeout": scenario.probe_config.timeout,
                          "unreachable_after": scenario.probe_config.unreachable_after},
            stimulus_period=scenario.stimulus_period,
            response_window=scenario.stimulus_period / 2 if scenario.stimulus_period else 50_000.0,
        )
        self.state: SequenceState | None = None
        self.capture = self.sampler = self.prober = self.stimulus = self.live = None
        self.report: ComparisonReport | None = None
        self._event_marks = {n: len(d.events) for n, d in testbed.devices.items()}
        self._failures: list[str] = []

    def enter(self, state: SequenceState) -> None:
        if self.state is not None and not legal_transition(self.state, state):
            raise RuntimeError(f"illegal transition {self.state.value} -> {state.value}")
        self.state = state
        self.art.transitions.append(state.value)
        log.info("test %d: %s", self.index, state.value)

    def wait_until(self, t: float) -> None:
        if self.clock.is_virtual:
            self.clock.run_until(t)
        else:
            self.clock.sleep_until(t)

    def run(self) -> RunArtifacts:
        sc = self.scenario
        try:
            self.enter(S.START)
            self.enter(S.POWER_CYCLE)
            rng = random.Random(self.seed)
            for i, dev in enumerate(self.bed.devices.values()):
                if sc.power_cycle_between_tests:
                    dev.seed = (dev.profile.rng_seed ^ rng.getrandbits(32) ^ i) & 0xFFFFFFFF
                    dev.power_cycle()
                else:
                    dev.power_on()

            self.enter(S.BEGIN_MEASUREMENT)
            t0 = self.clock.now
            pre_end = t0 + sc.phases.pre_idle
            att_end = pre_end + sc.phases.attack
            post_end = att_end + sc.phases.post_idle
            self.art.phases = [("pre_idle", t0, pre_end), ("attack", pre_end, att_end),
                               ("post_idle", att_end, post_end)]
            self.art.save()
            self.capture = open_capture(self.art.path, sc.rotation, start_us=t0,
                                        epoch_offset_us=self.bed.epoch_offset_us)
            if not self.clock.is_virtual:
                self.capture.start_background()
            include_inputs = sc.stimulus_period is not None and self.device.profile.input_channels > 0
            self.sampler = Sampler([self.device], sc.sample_rate, self.clock, include_inputs=include_inputs)
            self.art.channel_labels = list(self.sampler.labels)
            self.sampler.start()
            self.prober = Prober(list(self.bed.devices.values()), sc.probe_config, self.clock, self.capture)
            self.prober.start()
            self.live = _LiveStatus(self)
            self.live.start()
            if include_inputs:
                self.stimulus = _Stimulus(self.device, sc.stimulus_period, self.clock, random.Random(self.seed + 1))
                self.stimulus.start()

            self.enter(S.PRE_IDLE)
            self.wait_until(pre_end)

            self.enter(S.ATTACK)
            recover = None
            if sc.recovery_power_cycle and self.clock.is_virtual:
                recover = self.clock.schedule(att_end, self._recover, priority=PRIO_CONTROL)
            attack_log = atk.run_attack(self.spec, self.bed.devices, self.clock, self.capture, seed=self.seed)
            self.wait_until(att_end)
            if sc.recovery_power_cycle and recover is None:
                self._recover()
            atk.write_attack_log(attack_log, self.art.file(ATTACK_FILE))
            if attack_log.notes:
                self.art.attack["notes"] = attack_log.notes

            self.enter(S.POST_IDLE)
            self.wait_until(post_end)

            self.enter(S.END_MEASUREMENT)
            self._stop_collectors()
            self._check_collectors()

            self.enter(S.ANALYZE)
            self.art.status = "complete"
            self.art.save()
            self.report = compare(self.art, sc.thresholds)
            emit(self.report, self.art.path, sc.report_formats, stem=REPORT_STEM)
            self.enter(S.DONE if self.last else S.START)
        except Exception as exc:
            log.exception("test %d aborted in state %s", self.index, self.state and self.state.value)
            self.art.status = "aborted"
            self.art.error = f"{self.state.value if self.state else 'Start'}: {type(exc).__name__}: {exc}"
            try:
                self._stop_collectors()
            except Exception as inner:  # keep the first error
                log.warning("collector shutdown failed: %s", inner)
        finally:
            self._record_device_events()
            self.art.save()
        return self.art

    def _recover(self) -> None:
        self.device.power_cycle()

    def _stop_collectors(self) -> None:
        if self.live is not None:
            self.live.stop()
            self.live = None
        if self.stimulus is not None:
            self.stimulus.stop()
            self.stimulus = None
        if self.sampler is not None:
            failed = self.sampler.failed
            trace = self.sampler.stop()
            self.sampler = None
            export_trace(trace, self.art.file(TRACE_FILE))
            if failed:
                self._failures.append(f"sampler failed: {failed}")
        if self.prober is not None:
            records = self.prober.stop()
            self.prober = None
            write_probe_log(records, self.art.file(PROBES_FILE))
        if self.capture is not None:
            manifest = self.capture.close()
            self.capture = None
            if manifest["dropped"]:
                self.art.warnings.append(f"capture dropped {manifest['dropped']} records")

    def _check_collectors(self) -> None:
        if self._failures:
            raise SequenceAborted("; ".join(self._failures))

    def _record_device_events(self) -> None:
        for name, dev in self.bed.devices.items():
            for t, what in dev.events[self._event_marks[name]:]:
                self.art.device_events.append((t, name, what))
        self.art.device_events.sort()


def _spec_dict(spec: atk.AttackSpec) -> dict:
    out = {}
    for f in fields(spec):
        v = getattr(spec, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def run_sequence(scenario: Scenario, test_index: int, testbed: Testbed | None = None) -> RunArtifacts:
    """Run one test of the scenario and return its artifacts (status 'aborted' on failure)."""
    tests = scenario.expanded_tests()
    if not 0 <= test_index < len(tests):
        raise IndexError(f"test index {test_index} out of range (0..{len(tests) - 1})")
    own = testbed is None
    bed = testbed or Testbed(scenario)
    try:
        seq = _Sequence(scenario, test_index, tests[test_index], bed, last=test_index == len(tests) - 1)
        return seq.run()
    finally:
        if own:
            bed.shutdown()


@dataclass
class CampaignRow:
    test_id: int
    target: str
    attack: str
    status: str
    influenced: bool | None
    recovered: bool | None
    error: str | None = None

    def verdict_line(self) -> str:
        if self.status != "complete":
            return f"test {self.test_id} {self.attack} -> {self.target}: {self.status} ({self.error})"
        return (f"test {self.test_id} {self.attack} -> {self.target}: influenced={str(self.influenced).lower()} "
                f"recovered={str(self.recovered).lower()}")


@dataclass
class CampaignSummary:
    rows: list[CampaignRow] = field(default_factory=list)
    artifacts: list[RunArtifacts] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.status == "complete" for r in self.rows)


def run_all(scenario: Scenario, on_result: Callable[[CampaignRow], None] | None = None) -> CampaignSummary:
    """Run every test in order; failures are recorded and the campaign continues."""
    tests = scenario.expanded_tests()
    summary = CampaignSummary()
    if not tests:
        return summary
    bed = Testbed(scenario)
    try:
        for i, spec in enumerate(tests):
            seq = _Sequence(scenario, i, spec, bed, last=i == len(tests) - 1)
            art = seq.run()
            rep = seq.report
            row = CampaignRow(i, spec.target, spec.kind, art.status,
                              rep.influenced if rep else None, rep.recovered if rep else None, art.error)
            summary.rows.append(row)
            summary.artifacts.append(art)
            if on_result:
                on_result(row)
    finally:
        bed.shutdown()
    return summary
