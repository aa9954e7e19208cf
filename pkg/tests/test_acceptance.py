"""Acceptance suite. Each test carries a ``criterion`` marker and the
conftest prints one PASS/FAIL line per criterion in the terminal summary."""

import random
import struct
import textwrap
import time

import dpkt
import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from icsbench.capture import FROM_DEVICE, TO_DEVICE, CaptureRecord, RotationPolicy, open_capture, read_pcap
from icsbench.cli import main
from icsbench.clock import VirtualClock
from icsbench.device_sim import DeviceProfile, spawn_device
from icsbench.orchestrator import CHAIN, load_scenario, run_all, run_sequence
from icsbench.probe import ProbeConfig, detection_time, read_probe_log
from icsbench.protocol import (DecodeError, MbapHeader, ReadCoils, ReadHoldingRegisters, WriteSingleCoil,
                               WriteSingleRegister, decode_frame, encode_frame, seed_corpus)
from icsbench.attacks import mutate
from icsbench.report import compare
from icsbench.signal import (SignalTrace, Sampler, cycle_times, detect_edges, import_trace, response_times,
                             sample_outputs)

FULL_CHAIN = [s.value for s in CHAIN]
SAMPLE = 1.0  # us, one sample period at 1 MHz


def scenario_file(directory, text):
    directory.mkdir(parents=True, exist_ok=True)
    p = directory / "scenario.yaml"
    p.write_text(textwrap.dedent(text).lstrip())
    return p


# -- 1 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(1, "10 s idle s7-like run: >=10k cycles within [140, 300] us, band >= 100 us, < 30 s wall")
def test_idle_reproduction():
    t0 = time.perf_counter()
    clock = VirtualClock()
    dev = spawn_device(DeviceProfile("s7", t_exec=140, h_max=160, c_pkt=10, rng_seed=2024), clock)
    dev.power_on()
    trace = sample_outputs([dev], 1e6, 10e6, clock)
    d = cycle_times(detect_edges(trace, trace.channel_index("s7", "q0"))).durations
    wall = time.perf_counter() - t0
    print(f"cycles={len(d)} min={d.min()} max={d.max()} mean={d.mean():.2f} wall={wall:.2f}s")
    assert len(d) >= 10_000
    assert d.min() >= 140 - SAMPLE and d.max() <= 300 + SAMPLE
    assert d.max() - d.min() >= 100
    assert wall < 30


# -- 2 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(2, "flood at 50k msg/s: attack mean within 5% of 440 us, pre-idle mean within 5% of 220 us")
def test_load_fixed_point(tmp_path):
    t_exec, h_max, c_pkt, r = 140.0, 160.0, 10.0, 0.05  # r in msgs per us
    expected_attack = (t_exec + h_max / 2) / (1 - c_pkt * r)
    expected_idle = t_exec + h_max / 2
    assert (expected_attack, expected_idle) == (440.0, 220.0)

    sc = load_scenario(scenario_file(tmp_path, f"""
        fleet:
          - {{name: plc, t_exec: 140us, h_max: 160us, c_pkt: 10us, q_max: 64, buffer_cap: 512}}
        tests:
          - {{type: flood, target: plc, rate: 50000}}
        phases: {{pre_idle: 1s, attack: 1s, post_idle: 1s}}
        output_dir: {tmp_path / 'out'}
        """))
    art = run_sequence(sc, 0)
    assert art.status == "complete", art.error
    rep = compare(art)
    pre, att = rep.phases["pre_idle"].cycles.mean, rep.phases["attack"].cycles.mean
    print(f"pre mean={pre:.2f} attack mean={att:.2f}")
    assert abs(att - expected_attack) <= 0.05 * expected_attack
    assert abs(pre - expected_idle) <= 0.05 * expected_idle


# -- 3 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(3, "crash detected within 350 ms, outputs keep toggling, full post-idle reachability, "
                          "influenced and recovered")
def test_crash_detection_recovery(tmp_path):
    sc = load_scenario(scenario_file(tmp_path, f"""
        fleet:
          - {{name: plc, q_max: 16, buffer_cap: 64, crash_overload_cycles: 100}}
        tests:
          - {{type: flood, target: plc, rate: 200000}}
        phases: {{pre_idle: 500ms, attack: 1s, post_idle: 1s}}
        recovery_power_cycle: true
        output_dir: {tmp_path / 'out'}
        """))
    art = run_sequence(sc, 0)
    assert art.status == "complete", art.error
    crashes = [t for t, dev, what in art.device_events if dev == "plc" and what == "crash"]
    assert len(crashes) == 1
    crash_t = crashes[0]
    att_start, att_end = art.phase("attack")
    assert att_start <= crash_t < att_end

    cfg = ProbeConfig(**art.probe_config)
    detected = detection_time(read_probe_log(art.path / "probes.csv"), "plc", crash_t, cfg)
    print(f"crash at {crash_t:.0f} us, detected at {detected} us")
    assert detected is not None and detected - crash_t <= 350_000

    trace = import_trace(art.path / "trace.csv", art.channel_labels)
    edges = detect_edges(trace, trace.channel_index("plc", "q0")).times
    during = edges[(edges >= crash_t) & (edges < att_end)]
    assert len(during) > 0.9 * (att_end - crash_t) / 300
    assert np.diff(during).max() <= 300 + SAMPLE

    rep = compare(art)
    post = rep.phases["post_idle"]
    assert post.reachability.uptime == 1.0
    assert not post.unreachable
    print(f"influenced: {rep.influenced_reasons}")
    assert rep.influenced and rep.recovered, rep.recovered_reasons


# -- 4 ---------------------------------------------------------------------------------------


def boundary_requests():
    for addr in (0, 1, 0x7FFF, 0xFFFE, 0xFFFF):
        for count in (1, 2, 124, 125):
            if addr + count <= 0x10000:
                yield ReadHoldingRegisters(addr, count)
        for count in (1, 2, 1999, 2000):
            if addr + count <= 0x10000:
                yield ReadCoils(addr, count)
    for addr in (0, 1, 0x7FFF, 0x8000, 0xFFFE, 0xFFFF):
        yield WriteSingleCoil(addr, True)
        yield WriteSingleCoil(addr, False)
        for value in (0, 1, 0x7FFF, 0x8000, 0xFFFE, 0xFFFF):
            yield WriteSingleRegister(addr, value)


def random_request(rng):
    kind = rng.randrange(4)
    if kind == 0:
        count = rng.randint(1, 2000)
        return ReadCoils(rng.randint(0, 0x10000 - count), count)
    if kind == 1:
        count = rng.randint(1, 125)
        return ReadHoldingRegisters(rng.randint(0, 0x10000 - count), count)
    if kind == 2:
        return WriteSingleCoil(rng.randint(0, 0xFFFF), rng.random() < 0.5)
    return WriteSingleRegister(rng.randint(0, 0xFFFF), rng.randint(0, 0xFFFF))


def _decode_total(data):
    for response in (False, True):
        try:
            decode_frame(data, response=response)
        except DecodeError:
            pass


@pytest.mark.criterion(4, "codec identity on boundary sweep and 1e5 random PDUs; 1e5 random and 1e5 mutant frames "
                          "decode without abnormal termination")
def test_codec():
    headers = [MbapHeader(t, u) for t in (0, 1, 0xFFFF) for u in (0, 1, 0xFF)]
    n = 0
    for pdu in boundary_requests():
        for h in headers:
            assert decode_frame(encode_frame(h, pdu)) == (h, pdu)
            n += 1
    kinds = {type(p) for p in boundary_requests()}
    assert len(kinds) == 4 and n > 300

    rng = random.Random(4)
    for _ in range(100_000):
        h = MbapHeader(rng.randint(0, 0xFFFF), rng.randint(0, 0xFF))
        pdu = random_request(rng)
        assert decode_frame(encode_frame(h, pdu)) == (h, pdu)

    for _ in range(100_000):
        _decode_total(rng.randbytes(rng.randint(0, 300)))

    corpus = seed_corpus()
    for _ in range(100_000):
        _decode_total(mutate(rng.choice(corpus), rng))


# -- 5 ---------------------------------------------------------------------------------------


def oracle_edges(samples, start_index, period_us):
    out = []
    for i in range(1, len(samples)):
        if samples[i] != samples[i - 1]:
            out.append(((start_index + i) * period_us, "rising" if samples[i] else "falling"))
    return out


@pytest.mark.criterion(5, "detect_edges equals sample-diff oracle on 1000 random traces; cycle sums telescope")
def test_signal_oracle():
    rng = random.Random(5)
    for _ in range(1000):
        n = rng.randint(0, 3000)
        p_flip = rng.choice([0.001, 0.05, 0.3, 0.9])
        level, samples = rng.randint(0, 1), []
        for _ in range(n):
            if rng.random() < p_flip:
                level ^= 1
            samples.append(level)
        start = rng.randint(0, 10**9)
        period_ns = rng.choice([10.0, 1000.0, 4000.0])
        edges = detect_edges(SignalTrace(period_ns, start, [samples]), 0)
        assert list(edges) == oracle_edges(samples, start, period_ns / 1000)
        ct = cycle_times(edges)
        if len(edges) >= 2:
            assert int(ct.ticks.sum()) == int(edges.indices[-1] - edges.indices[0])
            assert len(ct) == len(edges) - 1


# -- 6 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(6, "1000 input edges at T=200 us: every response in [T, 2T] + one sample, none unmatched")
def test_response_time_bound():
    T = 200.0
    clock = VirtualClock()
    dev = spawn_device(DeviceProfile("plc", t_exec=T, h_max=0, c_pkt=0), clock)
    dev.power_on()
    sampler = Sampler([dev], 1e6, clock)
    sampler.start()
    rng = random.Random(6)
    level, t = 0, 1000.0
    for _ in range(1000):
        t += 2 * T + 10 + rng.random() * 600  # spacing leaves each response room before the next edge
        level ^= 1
        dev.set_input(0, level, at=t)
    clock.run_until(t + 5 * T)
    trace = sampler.stop()
    stim = detect_edges(trace, trace.channel_index("plc", "i0"))
    resp = detect_edges(trace, trace.channel_index("plc", "q1"))
    assert len(stim) == 1000
    r = response_times(stim, resp, 2 * T + SAMPLE)
    print(f"matched={len(r)} min={r.delays.min()} max={r.delays.max()} unmatched={r.unmatched_stimuli}")
    assert r.unmatched_stimuli == 0 and len(r) == 1000
    assert r.delays.min() >= T - SAMPLE and r.delays.max() <= 2 * T + SAMPLE


# -- 7 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(7, "pcap magic and version, payload-exact round trip, no split packets, dpkt accepts")
def test_pcap_validity(tmp_path):
    rng = random.Random(7)
    a, b = ("192.168.0.200", 40000), ("192.168.0.10", 502)
    recs = []
    t = 1_700_000_000_000_000
    for i in range(2000):
        t += rng.randint(0, 5000)
        direction = rng.choice([TO_DEVICE, FROM_DEVICE])
        src, dst = (a, b) if direction == TO_DEVICE else (b, a)
        recs.append(CaptureRecord(CaptureRecord.split_time(t), src, dst, direction,
                                  rng.randbytes(rng.randint(0, 1400)), rng.choice(["tcp", "udp"])))
    policy = RotationPolicy(max_bytes=64 * 1024, max_duration=None)
    w = open_capture(tmp_path, policy)
    for r in recs:
        w.record(r)
    manifest = w.close()
    assert len(manifest["files"]) > 5

    back = []
    for name in manifest["files"]:
        data = (tmp_path / name).read_bytes()
        magic, major, minor = struct.unpack_from("<IHH", data)
        assert (magic, major, minor) == (0xA1B2C3D4, 2, 4)
        # walk record headers: every packet is complete and the file ends exactly on a boundary
        off, count = 24, 0
        while off < len(data):
            incl = struct.unpack_from("<IIII", data, off)[2]
            off += 16 + incl
            count += 1
        assert off == len(data)
        file_recs = read_pcap(tmp_path / name)
        assert len(file_recs) == count
        back += file_recs

        with open(tmp_path / name, "rb") as fh:
            n = 0
            for _ts, buf in dpkt.pcap.Reader(fh):
                ip = dpkt.ethernet.Ethernet(buf).data
                assert isinstance(ip, dpkt.ip.IP)
                assert isinstance(ip.data, (dpkt.tcp.TCP, dpkt.udp.UDP))
                n += 1
            assert n == count
    assert [r.payload for r in back] == [r.payload for r in recs]
    assert back == recs


# -- 8 ---------------------------------------------------------------------------------------

TEST_LINES = {
    "flood": "{type: flood, target: %s, rate: 500}",
    "fuzz": "{type: fuzz, target: %s, iterations: 5}",
    "port_sweep": "{type: port_sweep, target: %s, ports: [502, 81]}",
    "conn_exhaust": "{type: conn_exhaust, target: %s, target_conns: 3, hold: 20ms}",
}


@pytest.mark.criterion(8, "every run follows Start, PowerCycle, BeginMeasurement, PreIdle, Attack, PostIdle, "
                          "EndMeasurement, Analyze, then Start or Done")
@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(n_dev=st.integers(1, 3), kinds=st.lists(st.sampled_from(sorted(TEST_LINES)), min_size=1, max_size=5),
       seed=st.integers(0, 2**31), data=st.data())
def test_sequence_fidelity(tmp_path_factory, n_dev, kinds, seed, data):
    d = tmp_path_factory.mktemp("seq")
    names = [f"d{i}" for i in range(n_dev)]
    lines = ["  - " + TEST_LINES[k] % data.draw(st.sampled_from(names)) for k in kinds]
    fleet = "\n".join(f"  - name: {n}" for n in names)
    text = (f"fleet:\n{fleet}\ntests:\n" + "\n".join(lines) +
            f"\nphases: {{pre_idle: 50ms, attack: 50ms, post_idle: 50ms}}\nmaster_seed: {seed}\n"
            f"output_dir: {d / 'out'}\n")
    summary = run_all(load_scenario(scenario_file(d, text)))
    assert len(summary.artifacts) == len(kinds)
    for i, art in enumerate(summary.artifacts):
        assert art.status == "complete", art.error
        assert art.transitions == FULL_CHAIN + ["Done" if i == len(kinds) - 1 else "Start"]


# -- 9 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(9, "run --clock virtual --seed S twice gives byte-identical trace, probes, attack, report")
def test_cli_determinism(tmp_path, capsys):
    p = scenario_file(tmp_path, """
        fleet:
          - name: plc
          - name: hmi
        tests:
          - {type: flood, target: plc, rate: 5000}
          - {type: fuzz, target: all, iterations: 40}
          - {type: conn_exhaust, target: plc, target_conns: 12, hold: 100ms}
        phases: {pre_idle: 300ms, attack: 300ms, post_idle: 300ms}
        stimulus_period: 10ms
        """)
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["run", str(p), "--clock", "virtual", "--seed", "1234", "--out", str(out)]) == 0
        outs.append(out)
    print(capsys.readouterr().out)
    for i in range(4):
        for name in ("trace.csv", "probes.csv", "attack.csv", "report.csv"):
            fa, fb = outs[0] / f"test_{i}" / name, outs[1] / f"test_{i}" / name
            assert fa.read_bytes() == fb.read_bytes(), f"test_{i}/{name} differs"
