import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icsbench.clock import VirtualClock
from icsbench.device_sim import DeviceProfile, spawn_device
from icsbench.signal import (EdgeList, Sampler, SignalTrace, TraceFormatError, cycle_times, detect_edges,
                             export_trace, import_trace, response_times, sample_outputs)


def brute_force_edges(samples, start_index, period_us):
    out = []
    for i in range(1, len(samples)):
        if samples[i] != samples[i - 1]:
            out.append(((start_index + i) * period_us, "rising" if samples[i] else "falling"))
    return out


def test_detect_edges_example():
    trace = SignalTrace(1000.0, 0, [[0, 0, 1, 1, 0]])
    assert list(detect_edges(trace, 0)) == [(2.0, "rising"), (4.0, "falling")]


def test_all_zero_no_edges():
    assert len(detect_edges(SignalTrace(1000.0, 0, [np.zeros(100)]), 0)) == 0


def test_detect_edges_bad_channel():
    with pytest.raises(IndexError):
        detect_edges(SignalTrace(1000.0, 0, [[0, 1]]), 1)


def test_sample_rate_limit():
    with pytest.raises(ValueError):
        SignalTrace(5.0, 0, [[0]])  # 200 MHz
    SignalTrace(10.0, 0, [[0]])


@settings(max_examples=200)
@given(st.lists(st.integers(0, 1), max_size=400), st.integers(0, 10**6), st.sampled_from([10.0, 1000.0, 2500.0]))
def test_detect_edges_matches_brute_force(samples, start, period_ns):
    trace = SignalTrace(period_ns, start, [samples])
    assert list(detect_edges(trace, 0)) == brute_force_edges(samples, start, period_ns / 1000)


def test_cycle_times_example():
    ct = cycle_times(EdgeList.from_times([0, 100, 250, 400]))
    assert ct.durations.tolist() == [100, 150, 150]
    assert ct.starts.tolist() == [0, 100, 250]


def test_cycle_times_insufficient():
    assert cycle_times(EdgeList.from_times([5])).insufficient_data
    assert cycle_times(EdgeList.from_times([])).insufficient_data


@settings(max_examples=200)
@given(st.lists(st.integers(0, 1), min_size=2, max_size=400))
def test_cycle_sum_telescopes(samples):
    edges = detect_edges(SignalTrace(1000.0, 3, [samples]), 0)
    ct = cycle_times(edges)
    if len(edges) >= 2:
        assert ct.ticks.sum() == edges.indices[-1] - edges.indices[0]
        assert ct.durations.sum() == edges.times[-1] - edges.times[0]
        assert (ct.durations > 0).all()
        assert len(ct) == len(edges) - 1


def test_response_times_examples():
    r = response_times(EdgeList.from_times([0]), EdgeList.from_times([250]), 1000)
    assert r.delays.tolist() == [250] and r.unmatched_stimuli == 0
    r = response_times(EdgeList.from_times([0]), EdgeList.from_times([2000]), 1000)
    assert len(r) == 0 and r.unmatched_stimuli == 1


def test_response_strictly_after_and_consumed():
    # a response at the same instant is not a response; one response serves one stimulus
    r = response_times(EdgeList.from_times([100, 110]), EdgeList.from_times([100, 150]), 1000)
    assert r.delays.tolist() == [50]
    assert r.unmatched_stimuli == 1


def test_response_window_must_be_positive():
    with pytest.raises(ValueError):
        response_times(EdgeList.from_times([0]), EdgeList.from_times([1]), 0)


@settings(max_examples=200)
@given(st.lists(st.floats(0, 1e6), max_size=40, unique=True), st.lists(st.floats(1, 500), max_size=40),
       st.floats(0, 1e4))
def test_response_matching_stable_under_window(stim, delays, extra):
    # stimuli spaced well apart, every true delay under the smallest window
    stim = sorted({round(s / 1000) * 1000 for s in stim})
    resp = [s + d for s, d in zip(stim, delays)]
    a = response_times(EdgeList.from_times(stim), EdgeList.from_times(resp), 500)
    b = response_times(EdgeList.from_times(stim), EdgeList.from_times(resp), 500 + extra)
    assert a.delays.tolist() == b.delays.tolist()
    assert a.stimulus_times.tolist() == b.stimulus_times.tolist()


# -- sampling -------------------------------------------------------------------


def constant_device(clock, T=200.0, **kw):
    dev = spawn_device(DeviceProfile("plc", t_exec=T, h_max=0, c_pkt=0, **kw), clock)
    return dev


def test_constant_toggler_50_edges():
    clock = VirtualClock()
    dev = constant_device(clock)
    dev.power_on()
    # window offset from the cycle grid so that no edge sits on a window boundary
    clock.run_until(100)
    trace = sample_outputs([dev], 1e6, 10_000, clock)
    edges = detect_edges(trace, trace.channel_index("plc", "q0"))
    assert len(edges) == 50
    assert set(np.diff(edges.times).tolist()) == {200.0}


def test_powered_off_flat_low():
    clock = VirtualClock()
    dev = constant_device(clock)
    trace = sample_outputs([dev], 1e6, 1000, clock)
    assert trace.n_samples == 1000
    assert not trace.channels[0].any()
    assert len(detect_edges(trace, 0)) == 0


def test_zero_duration_empty_trace():
    clock = VirtualClock()
    dev = constant_device(clock)
    dev.power_on()
    assert sample_outputs([dev], 1e6, 0, clock).n_samples == 0


def test_unknown_device_lookup_error():
    with pytest.raises(KeyError):
        sample_outputs(["nope"], registry={})


def test_100mhz_quantization_bound():
    # 20 kHz toggle: cycle 25 us. Sampled at 100 MHz, each edge lies within 10 ns after the true edge.
    clock = VirtualClock()
    dev = spawn_device(DeviceProfile("plc", t_exec=25.0, h_max=3.0, c_pkt=0, rng_seed=4), clock)
    true_edges = []
    dev.edge_listeners.append(lambda t, s, lvl: true_edges.append(t) if s == "q0" else None)
    dev.power_on()
    trace = sample_outputs([dev], 100e6, 5000, clock)
    got = detect_edges(trace, 0).times
    truth = np.asarray([t for t in true_edges if 0 < t < trace.end_time])
    assert len(got) == len(truth) > 100
    assert np.all(got - truth >= -1e-9)
    assert np.all(got - truth <= 0.010 + 1e-9)


def test_constant_cycle_within_one_sample():
    clock = VirtualClock()
    dev = constant_device(clock, T=201.3)
    dev.power_on()
    trace = sample_outputs([dev], 1e6, 50_000, clock)
    d = cycle_times(detect_edges(trace, 0)).durations
    assert np.all(np.abs(d - 201.3) <= 1.0 + 1e-9)


def test_s7_like_idle_band():
    clock = VirtualClock()
    dev = spawn_device(DeviceProfile("s7", t_exec=140, h_max=160, c_pkt=10, rng_seed=1), clock)
    dev.power_on()
    d = cycle_times(detect_edges(sample_outputs([dev], 1e6, 200_000, clock), 0)).durations
    assert d.min() >= 140 and d.max() <= 300


def test_response_delay_bound_sampled():
    T = 200.0
    clock = VirtualClock()
    dev = constant_device(clock, T=T)
    dev.power_on()
    sampler = Sampler([dev], 1e6, clock)
    sampler.start()
    level = 0
    for k in range(100):
        level ^= 1
        dev.set_input(0, level, at=1000 + k * 1000 + (k * 73) % 997)
    clock.run_until(110_000)
    trace = sampler.stop()
    stim = detect_edges(trace, trace.channel_index("plc", "i0"))
    resp = detect_edges(trace, trace.channel_index("plc", "q1"))
    r = response_times(stim, resp, 2 * T + 1)
    assert r.unmatched_stimuli == 0 and len(r) == 100
    assert r.delays.min() >= T - 1 and r.delays.max() <= 2 * T + 1


def test_sampler_warns_when_undersampling():
    dev = spawn_device(DeviceProfile("plc", t_exec=100), VirtualClock())
    with pytest.warns(UserWarning):
        Sampler([dev], 1000.0)


def test_trace_start_is_grid_aligned():
    clock = VirtualClock()
    dev = constant_device(clock)
    dev.power_on()
    clock.run_until(1234.5)
    trace = sample_outputs([dev], 1e6, 1000, clock)
    assert trace.start_index == 1235
    assert math.isclose(trace.start_time, 1235.0)


# -- CSV --------------------------------------------------------------------------


def test_import_three_rows(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("sample_period_ns,1000\nt_index,ch0\n0,0\n1,1\n2,1\n")
    trace = import_trace(p)
    assert trace.n_samples == 3 and trace.channels[0].tolist() == [0, 1, 1]


def test_import_fills_gaps(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("sample_period_ns,1000\nt_index,ch0,ch1\n10,0,1\n13,1,1\n15,1,0\n")
    trace = import_trace(p)
    assert trace.start_index == 10
    assert trace.channels[0].tolist() == [0, 0, 0, 1, 1, 1]
    assert trace.channels[1].tolist() == [1, 1, 1, 1, 1, 0]


@pytest.mark.parametrize("text, line", [
    ("", 1),
    ("period,1000\n", 1),
    ("sample_period_ns,-1\n", 1),
    ("sample_period_ns,1000\nindex,ch0\n", 2),
    ("sample_period_ns,1000\nt_index,ch0\n0,2\n", 3),
    ("sample_period_ns,1000\nt_index,ch0\n0,1\n1,0,1\n", 4),
    ("sample_period_ns,1000\nt_index,ch0\n5,1\n5,0\n", 4),
])
def test_import_errors_name_line(tmp_path, text, line):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(TraceFormatError) as exc:
        import_trace(p)
    assert exc.value.line == line


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.integers(0, 1), min_size=30, max_size=30), min_size=1, max_size=3),
       st.integers(0, 10**9))
def test_export_import_round_trip(tmp_path_factory, channels, start):
    trace = SignalTrace(1000.0, start, channels)
    p = tmp_path_factory.mktemp("rt") / "trace.csv"
    export_trace(trace, p)
    back = import_trace(p)
    assert back.start_index == start
    assert [c.tolist() for c in back.channels] == channels
    for ch in range(len(channels)):
        assert list(detect_edges(back, ch)) == list(detect_edges(trace, ch))


def test_export_is_sparse(tmp_path):
    trace = SignalTrace(1000.0, 0, [np.concatenate([np.zeros(5000), np.ones(5000)])])
    p = tmp_path / "t.csv"
    export_trace(trace, p)
    assert p.read_text().splitlines()[2:] == ["0,0", "5000,1", "9999,1"]
