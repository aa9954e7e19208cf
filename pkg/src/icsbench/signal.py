"""Software logic analyzer and timing extraction.

Traces are sampled on a fixed grid anchored at time zero: sample ``k`` of a
trace covers absolute time ``k * sample_period``. The trace CSV stores those
absolute indices, so a trace round-trips with its start time intact, and only
rows where some channel changes need to be written.
"""

from __future__ import annotations

import csv
import math
import threading
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .clock import RealClock, VirtualClock
from .device_sim import Device

MAX_SAMPLE_RATE = 100e6
DEFAULT_SAMPLE_RATE = 1e6


class TraceFormatError(ValueError):
    def __init__(self, line: int, msg: str) -> None:
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass
class SignalTrace:
    sample_period: float  # ns
    start_index: int  # absolute index of the first sample
    channels: list[np.ndarray]
    channel_labels: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.sample_period <= 0:
            raise ValueError("sample_period must be > 0")
        if 1e9 / self.sample_period > MAX_SAMPLE_RATE * (1 + 1e-9):
            raise ValueError(f"sample rate {1e9 / self.sample_period:g} Hz exceeds {MAX_SAMPLE_RATE:g} Hz")
        self.channels = [np.asarray(c, dtype=np.uint8) for c in self.channels]
        if len({len(c) for c in self.channels}) > 1:
            raise ValueError("all channels must have the same sample count")
        if not self.channel_labels:
            self.channel_labels = [("trace", f"ch{i}") for i in range(len(self.channels))]

    @property
    def period_us(self) -> float:
        return self.sample_period / 1000.0

    @property
    def start_time(self) -> float:
        """Time of the first sample (us)."""
        return self.start_index * self.period_us

    @property
    def n_samples(self) -> int:
        return len(self.channels[0]) if self.channels else 0

    @property
    def end_time(self) -> float:
        return (self.start_index + self.n_samples) * self.period_us

    def channel_index(self, device: str, signal: str) -> int:
        try:
            return self.channel_labels.index((device, signal))
        except ValueError:
            raise KeyError(f"no channel {signal!r} for device {device!r}") from None


@dataclass
class EdgeList:
    times: np.ndarray  # us, strictly increasing
    rising: np.ndarray  # bool
    indices: np.ndarray | None = None  # absolute sample indices, when sampled
    sample_period: float | None = None  # ns

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self) -> Iterator[tuple[float, str]]:
        for t, r in zip(self.times.tolist(), self.rising.tolist()):
            yield t, "rising" if r else "falling"

    @classmethod
    def from_times(cls, times: Sequence[float], first_rising: bool = True) -> EdgeList:
        t = np.asarray(times, dtype=np.float64)
        rising = (np.arange(len(t)) % 2 == 0) == first_rising
        return cls(t, rising)


@dataclass
class CycleTimeSeries:
    starts: np.ndarray  # us
    durations: np.ndarray  # us
    ticks: np.ndarray | None = None  # durations in whole samples, when sampled
    insufficient_data: bool = False

    def __len__(self) -> int:
        return len(self.durations)


@dataclass
class ResponseTimeSeries:
    stimulus_times: np.ndarray
    delays: np.ndarray
    unmatched_stimuli: int = 0
    unmatched_times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.delays)


# -- sampling ---------------------------------------------------------------------


def _labels_for(device: Device, include_inputs: bool) -> list[tuple[str, str]]:
    labels = [(device.name, f"q{i}") for i in range(device.profile.output_channels)]
    if include_inputs:
        labels += [(device.name, f"i{i}") for i in range(device.profile.input_channels)]
    return labels


class Sampler:
    """Collects channel edges from devices between start() and stop().

    On a virtual clock the trace is rebuilt exactly from device edge events,
    quantized to the sample grid. On a real clock output snapshots are polled
    from a background thread at up to the sample rate.
    """

    def __init__(self, devices: Sequence[Device], sample_rate: float = DEFAULT_SAMPLE_RATE,
                 clock: VirtualClock | RealClock | None = None, *, include_inputs: bool = True) -> None:
        if not 0 < sample_rate <= MAX_SAMPLE_RATE:
            raise ValueError(f"sample_rate must be in (0, {MAX_SAMPLE_RATE:g}] Hz")
        self.devices = list(devices)
        self.clock = clock or (self.devices[0].clock if self.devices else VirtualClock())
        self.sample_period = 1e9 / sample_rate
        self.include_inputs = include_inputs
        fastest = max((1e6 / (2 * d.profile.t_exec) for d in self.devices if d.profile.toggle_enabled),
                      default=0.0)
        if sample_rate < 2 * fastest:
            warnings.warn(f"sample rate {sample_rate:g} Hz below twice the fastest toggle rate {fastest:g} Hz",
                          stacklevel=2)
        self.labels = [lab for d in self.devices for lab in _labels_for(d, include_inputs)]
        self._edges: dict[tuple[str, str], list[tuple[float, int]]] = {lab: [] for lab in self.labels}
        self._initial: dict[tuple[str, str], int] = {}
        self._start_index = 0
        self._hooks: list[tuple[Device, object]] = []
        self._poll_stop = threading.Event()
        self._poll_thread: threading.Thread | None = None
        self.failed: str | None = None

    def _snapshot(self, device: Device) -> dict[tuple[str, str], int]:
        out = {(device.name, f"q{i}"): v for i, v in enumerate(device.outputs)}
        if self.include_inputs:
            for ch in range(device.profile.input_channels):
                out[(device.name, f"i{ch}")] = device.input_level(ch)
        return out

    def start(self) -> None:
        p_us = self.sample_period / 1000.0
        self._start_index = math.ceil(self.clock.now / p_us - 1e-9)
        for d in self.devices:
            self._initial.update(self._snapshot(d))
        if self.clock.is_virtual:
            for d in self.devices:
                def hook(t: float, sig: str, level: int, name: str = d.name) -> None:
                    key = (name, sig)
                    if key in self._edges:
                        self._edges[key].append((t, level))
                d.edge_listeners.append(hook)
                self._hooks.append((d, hook))
        else:
            self._poll_thread = threading.Thread(target=self._poll, daemon=True, name="sampler")
            self._poll_thread.start()

    def _poll(self) -> None:
        last = dict(self._initial)
        period_s = self.sample_period / 1e9
        try:
            while not self._poll_stop.wait(period_s):
                t = self.clock.now
                for d in self.devices:
                    for key, v in self._snapshot(d).items():
                        if last[key] != v:
                            last[key] = v
                            self._edges[key].append((t, v))
        except Exception as exc:  # surfaced through stop()
            self.failed = repr(exc)

    def stop(self) -> SignalTrace:
        end = self.clock.now
        for d, hook in self._hooks:
            d.edge_listeners.remove(hook)
        self._hooks.clear()
        if self._poll_thread is not None:
            self._poll_stop.set()
            self._poll_thread.join()
        p_us = self.sample_period / 1000.0
        end_index = math.floor(end / p_us + 1e-9)
        n = max(end_index - self._start_index, 0)
        channels = [
            _reconstruct(self._initial.get(lab, 0), self._edges[lab], self._start_index, n, p_us)
            for lab in self.labels
        ]
        return SignalTrace(self.sample_period, self._start_index, channels, list(self.labels))


def _reconstruct(initial: int, edges: list[tuple[float, int]], start_index: int, n: int,
                 p_us: float) -> np.ndarray:
    if not edges or n == 0:
        return np.full(n, initial, dtype=np.uint8)
    times = np.fromiter((t for t, _ in edges), dtype=np.float64, count=len(edges))
    levels = np.fromiter((v for _, v in edges), dtype=np.uint8, count=len(edges))
    order = np.argsort(times, kind="stable")
    # first sample at or after the edge sees the new level
    idx = np.ceil(times[order] / p_us - 1e-9).astype(np.int64) - start_index
    idx = np.clip(idx, 0, n)
    levels = levels[order]
    keep = np.append(idx[1:] != idx[:-1], True)
    pos = np.concatenate([[0], idx[keep]])
    vals = np.concatenate([[initial], levels[keep]]).astype(np.uint8)
    return np.repeat(vals, np.diff(np.append(pos, n)))


def sample_outputs(devices: Iterable[Device | str], sample_rate: float = DEFAULT_SAMPLE_RATE,
                   duration: float = 0.0, clock: VirtualClock | RealClock | None = None,
                   *, registry: Mapping[str, Device] | None = None,
                   include_inputs: bool = False) -> SignalTrace:
    """Sample device outputs for `duration` microseconds and return the trace."""
    resolved = []
    for d in devices:
        if isinstance(d, str):
            if registry is None or d not in registry:
                raise KeyError(f"unknown device {d!r}")
            d = registry[d]
        resolved.append(d)
    sampler = Sampler(resolved, sample_rate, clock, include_inputs=include_inputs)
    sampler.start()
    if duration > 0:
        sampler.clock.sleep(duration)
    return sampler.stop()


# -- analysis ---------------------------------------------------------------------


def detect_edges(trace: SignalTrace, channel: int) -> EdgeList:
    if not 0 <= channel < len(trace.channels):
        raise IndexError(f"channel {channel} out of range")
    x = trace.channels[channel]
    idx = np.flatnonzero(x[1:] != x[:-1]) + 1
    absolute = idx.astype(np.int64) + trace.start_index
    return EdgeList(
        times=absolute * trace.period_us,
        rising=x[idx] == 1,
        indices=absolute,
        sample_period=trace.sample_period,
    )


def cycle_times(edges: EdgeList) -> CycleTimeSeries:
    """Edge-to-edge gaps of a once-per-cycle toggling output."""
    if len(edges) < 2:
        empty = np.zeros(0)
        return CycleTimeSeries(empty, empty, np.zeros(0, dtype=np.int64), insufficient_data=True)
    if edges.indices is not None and edges.sample_period is not None:
        ticks = np.diff(edges.indices)
        return CycleTimeSeries(edges.times[:-1].copy(), ticks * (edges.sample_period / 1000.0), ticks)
    return CycleTimeSeries(edges.times[:-1].copy(), np.diff(edges.times))


def response_times(stimulus: EdgeList, response: EdgeList, window: float) -> ResponseTimeSeries:
    """Greedy first-after matching of response edges to stimulus edges.

    Each response edge is consumed by at most one stimulus.
    """
    if window <= 0:
        raise ValueError("window must be > 0")
    s = stimulus.times.tolist()
    r = response.times.tolist()
    matched_t, delays, unmatched = [], [], []
    j = 0
    for t in s:
        while j < len(r) and r[j] <= t:
            j += 1
        if j < len(r) and r[j] - t <= window:
            matched_t.append(t)
            delays.append(r[j] - t)
            j += 1
        else:
            unmatched.append(t)
    return ResponseTimeSeries(np.asarray(matched_t), np.asarray(delays), len(unmatched), np.asarray(unmatched))


# -- trace CSV ----------------------------------------------------------------------


def export_trace(trace: SignalTrace, path: str | Path) -> None:
    """Write the trace CSV; unchanged rows between change points are omitted."""
    n = trace.n_samples
    data = np.vstack(trace.channels) if trace.channels else np.zeros((0, n), dtype=np.uint8)
    if n:
        change = np.zeros(n, dtype=bool)
        change[0] = change[-1] = True
        if len(data):
            change[1:] |= np.any(data[:, 1:] != data[:, :-1], axis=0)
        rows = np.flatnonzero(change)
    else:
        rows = np.zeros(0, dtype=np.int64)
    period = trace.sample_period
    period_txt = str(int(period)) if float(period).is_integer() else repr(float(period))
    with open(path, "w", newline="") as fh:
        fh.write(f"sample_period_ns,{period_txt}\n")
        fh.write(",".join(["t_index"] + [f"ch{i}" for i in range(len(trace.channels))]) + "\n")
        cols = data[:, rows].T if len(data) else np.zeros((len(rows), 0), dtype=np.uint8)
        for k, row in zip(rows.tolist(), cols.tolist()):
            fh.write(",".join([str(k + trace.start_index)] + [str(v) for v in row]) + "\n")


def import_trace(path: str | Path, labels: Sequence[tuple[str, str]] | None = None) -> SignalTrace:
    """Read a trace CSV. Gaps in t_index repeat the preceding row."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise TraceFormatError(1, "empty file") from None
        if len(first) != 2 or first[0].strip() != "sample_period_ns":
            raise TraceFormatError(1, "expected 'sample_period_ns,<value>'")
        try:
            period = float(first[1])
        except ValueError:
            raise TraceFormatError(1, f"bad sample period {first[1]!r}") from None
        if not period > 0:
            raise TraceFormatError(1, "sample period must be > 0")
        try:
            header = next(reader)
        except StopIteration:
            raise TraceFormatError(2, "missing column header") from None
        n_ch = len(header) - 1
        if header[0].strip() != "t_index" or [h.strip() for h in header[1:]] != [f"ch{i}" for i in range(n_ch)]:
            raise TraceFormatError(2, "expected 't_index,ch0,ch1,...'")
        indices: list[int] = []
        values: list[list[int]] = []
        for lineno, row in enumerate(reader, start=3):
            if not row:
                continue
            if len(row) != n_ch + 1:
                raise TraceFormatError(lineno, f"expected {n_ch + 1} fields, got {len(row)}")
            try:
                k = int(row[0])
            except ValueError:
                raise TraceFormatError(lineno, f"bad t_index {row[0]!r}") from None
            if indices and k <= indices[-1]:
                raise TraceFormatError(lineno, "t_index must be strictly increasing")
            vals = []
            for v in row[1:]:
                v = v.strip()
                if v not in ("0", "1"):
                    raise TraceFormatError(lineno, f"non-binary sample {v!r}")
                vals.append(int(v))
            indices.append(k)
            values.append(vals)
    if not indices:
        return SignalTrace(period, 0, [np.zeros(0, dtype=np.uint8) for _ in range(n_ch)], list(labels or []))
    start = indices[0]
    n = indices[-1] - start + 1
    pos = np.asarray(indices, dtype=np.int64) - start
    seg = np.diff(np.append(pos, n))
    table = np.asarray(values, dtype=np.uint8).reshape(len(indices), n_ch)
    channels = [np.repeat(table[:, c], seg) for c in range(n_ch)]
    return SignalTrace(period, start, channels, list(labels or []))
