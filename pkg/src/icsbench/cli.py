"""Command-line entry point.

Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import socket
import sys
import time
from dataclasses import replace
from pathlib import Path

import yaml

from .artifacts import RUN_FILE, RunArtifacts
from .capture import CaptureFormatError, read_pcap, TO_DEVICE
from .clock import RealClock
from .device_sim import ConfigError, StartupError, spawn_device
from .orchestrator import ScenarioError, _fleet_entry, _LineLoader, _Section, load_scenario, run_all
from .probe import read_probe_log
from .profiles import PRESETS
from .protocol import handle_request, mbap_framer
from .report import AnalysisError, Thresholds, analyze_run
from .signal import TraceFormatError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="icsbench", description="Communication robustness testbed for simulated industrial controllers.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run every test of a scenario")
    run.add_argument("scenario", type=Path)
    run.add_argument("--seed", type=int, help="override master_seed")
    run.add_argument("--clock", choices=("virtual", "realtime"), help="override clock_mode")
    run.add_argument("--out", type=Path, help="override output_dir")

    dev = sub.add_parser("device", help="run one simulated device on real TCP ports")
    dev.add_argument("profile", help="preset name or YAML file with one device entry")
    dev.add_argument("--host", default="127.0.0.1")
    dev.add_argument("--port-base", type=int, default=10000,
                     help="listen on port_base+port for every profile port (0: ephemeral)")
    dev.add_argument("--duration", type=float, help="seconds to run (default: until interrupted)")

    an = sub.add_parser("analyze", help="recompute report files for a test directory")
    an.add_argument("directory", type=Path)
    defaults = Thresholds()
    an.add_argument("--theta-mean", type=float, default=defaults.theta_mean)
    an.add_argument("--theta-max", type=float, default=defaults.theta_max)
    an.add_argument("--theta-rec", type=float, default=defaults.theta_rec)

    rp = sub.add_parser("replay", help="resend captured payloads to a TCP endpoint")
    rp.add_argument("pcap", type=Path)
    rp.add_argument("target", help="HOST:PORT")
    rp.add_argument("--rate", type=float, default=100.0, help="payloads per second")
    rp.add_argument("--to-device-only", action="store_true", help="skip payloads sent by the device")

    w = sub.add_parser("watch", help="print one status line per second for a test directory")
    w.add_argument("directory", type=Path)
    w.add_argument("--interval", type=float, default=1.0, help="seconds between lines")
    w.add_argument("--count", type=int, help="stop after this many lines")

    sub.add_parser("list-profiles", help="list built-in device profiles")
    return p


def cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.clock is not None:
        overrides["clock_mode"] = args.clock
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    scenario = replace(scenario, **overrides)
    summary = run_all(scenario, on_result=lambda row: print(row.verdict_line(), flush=True))
    if not summary.rows:
        print("no tests")
    return EXIT_OK if summary.ok else EXIT_RUNTIME


def _load_device_profile(spec: str):
    if spec in PRESETS:
        return PRESETS[spec].profile
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"{spec!r} is neither a preset nor an existing file")
    data = yaml.load(path.read_text(), Loader=_LineLoader)
    return _fleet_entry(_Section(data, "device", 1), 0).profile


def cmd_device(args) -> int:
    profile = _load_device_profile(args.profile)
    clock = RealClock()
    device = spawn_device(profile, clock, host=args.host, port_base=args.port_base)
    for port in profile.ports("modbus"):
        device.register_service(port, handle_request, mbap_framer)
    device.power_on()
    try:
        for port in [7, *profile.ports()]:
            host, bound = device.endpoint(port)
            print(f"{profile.name} port {port} -> {host}:{bound}", flush=True)
        deadline = time.monotonic() + args.duration if args.duration else None
        while deadline is None or time.monotonic() < deadline:
            time.sleep(0.1 if deadline is None else max(min(0.1, deadline - time.monotonic()), 0))
    except KeyboardInterrupt:
        pass
    finally:
        state = device.read_state()
        device.power_off()
    print(f"{profile.name}: {state.cycle_count} cycles, mode {state.mode.value}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if not args.directory.is_dir():
        raise ConfigError(f"{args.directory} is not a directory")
    thresholds = Thresholds(args.theta_mean, args.theta_max, args.theta_rec)
    try:
        report = analyze_run(args.directory, thresholds)
    except FileNotFoundError as exc:
        raise AnalysisError(str(exc)) from None
    print(f"influenced: {str(report.influenced).lower()}")
    for r in report.influenced_reasons:
        print(f"  - {r}")
    print(f"recovered: {str(report.recovered).lower()}")
    for r in report.recovered_reasons:
        print(f"  - {r}")
    return EXIT_OK


def _parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 < int(port) < 65536:
        raise ConfigError(f"bad target {text!r}; expected HOST:PORT")
    return host, int(port)


def cmd_replay(args) -> int:
    if args.rate <= 0:
        raise ConfigError("--rate must be > 0")
    endpoint = _parse_endpoint(args.target)
    records = read_pcap(args.pcap)
    if args.to_device_only:
        records = [r for r in records if r.direction == TO_DEVICE]
    sent = 0
    with socket.create_connection(endpoint, timeout=5.0) as sock:
        start = time.monotonic()
        for i, rec in enumerate(records):
            delay = start + i / args.rate - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            sock.sendall(rec.payload)
            sent += 1
    print(f"replayed {sent} payloads to {endpoint[0]}:{endpoint[1]} at {args.rate:g}/s")
    return EXIT_OK


def _watch_line(directory: Path) -> tuple[str, bool]:
    run_path = directory / RUN_FILE
    live_path = directory / "live.json"
    done = False
    parts = []
    if run_path.exists():
        art = RunArtifacts.load(directory)
        state = art.transitions[-1] if art.transitions else "-"
        parts.append(f"test {art.test_id} {art.status} state={state}")
        done = art.status != "running"
    if live_path.exists():
        live = json.loads(live_path.read_text())
        probes = " ".join(f"{k}={v}" for k, v in sorted(live.get("probes", {}).items()))
        parts.append(f"t={live['t_us'] / 1e6:.1f}s probes[{probes}]")
        if live.get("cycles"):
            parts.append(f"cycles={live['cycles']} mean={live['cycle_mean']:.1f}us "
                         f"min={live['cycle_min']:.1f}us max={live['cycle_max']:.1f}us")
    elif (directory / "probes.csv").exists():
        recs = read_probe_log(directory / "probes.csv")
        if recs:
            last = recs[-1]
            parts.append(f"last probe {last.target} {'timeout' if last.rtt is None else f'{last.rtt:.0f}us'}")
    if not parts:
        parts.append("waiting for run artifacts")
    return "  ".join(parts), done


def cmd_watch(args) -> int:
    if not args.directory.is_dir():
        raise ConfigError(f"{args.directory} is not a directory")
    n = 0
    while True:
        line, done = _watch_line(args.directory)
        print(line, flush=True)
        n += 1
        if done or (args.count is not None and n >= args.count):
            return EXIT_OK
        time.sleep(args.interval)


def cmd_list_profiles(args) -> int:
    print(f"{'preset':<15} {'vendor':<11} {'product':<21} {'ip':<14} ports")
    for key, preset in PRESETS.items():
        prof = preset.profile
        ports = ", ".join(f"{p}{'*' if tag == 'modbus' else ''}" for p, tag in prof.listen_ports)
        print(f"{key:<15} {prof.vendor_label:<11} {prof.name:<21} {preset.ip:<14} {ports}")
    print("(* = Modbus/TCP; other ports are accept-and-discard stubs)")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "device": cmd_device, "analyze": cmd_analyze, "replay": cmd_replay,
            "watch": cmd_watch, "list-profiles": cmd_list_profiles}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ScenarioError, ConfigError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (AnalysisError, TraceFormatError, CaptureFormatError, StartupError, OSError, RuntimeError,
            ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
