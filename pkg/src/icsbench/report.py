"""Phase statistics, influence/recovery verdicts and report files."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .artifacts import PHASES, RunArtifacts
from .probe import ProbeConfig, TargetReachability, reachability_summary, read_probe_log
from .signal import CycleTimeSeries, EdgeList, cycle_times, detect_edges, import_trace, response_times

GAP = "gap"
PHASE_COLORS = {"pre_idle": "#1f77b4", "attack": "#d62728", "post_idle": "#2ca02c", GAP: "#7f7f7f"}


class AnalysisError(RuntimeError):
    pass


@dataclass(frozen=True)
class CycleStats:
    count: int
    min: float | None = None
    max: float | None = None
    mean: float | None = None
    p50: float | None = None
    p95: float | None = None
    p99: float | None = None

    def rows(self) -> list[tuple[str, float]]:
        out: list[tuple[str, float]] = [("count", self.count)]
        if self.count:
            out += [(k, getattr(self, k)) for k in ("min", "max", "mean", "p50", "p95", "p99")]
        return out


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    n = len(sorted_values)
    return sorted_values[max(math.ceil(pct / 100.0 * n), 1) - 1]


def stats(series: CycleTimeSeries | Sequence[float] | np.ndarray) -> CycleStats:
    """Exact order statistics with nearest-rank percentiles."""
    values = series.durations if isinstance(series, CycleTimeSeries) else series
    xs = sorted(float(v) for v in np.asarray(values, dtype=np.float64).ravel())
    if not xs:
        return CycleStats(0)
    mean = min(max(math.fsum(xs) / len(xs), xs[0]), xs[-1])
    return CycleStats(len(xs), xs[0], xs[-1], mean,
                      nearest_rank(xs, 50), nearest_rank(xs, 95), nearest_rank(xs, 99))


@dataclass(frozen=True)
class Thresholds:
    theta_mean: float = 0.10
    theta_max: float = 0.25
    theta_rec: float = 0.10


@dataclass
class PhaseResult:
    name: str
    start: float
    end: float
    cycles: CycleStats
    reachability: TargetReachability | None
    unreachable: list[tuple[float, float | None]]
    responses: CycleStats
    unmatched_stimuli: int


@dataclass
class ComparisonReport:
    test_id: int
    target: str
    phases: dict[str, PhaseResult]
    influenced: bool
    influenced_reasons: list[str]
    recovered: bool
    recovered_reasons: list[str]
    thresholds: Thresholds
    cycle_rows: list[tuple[str, float, float]] = field(default_factory=list)


def partition(starts: np.ndarray, durations: np.ndarray,
              bounds: Sequence[tuple[str, float, float]]) -> np.ndarray:
    """Label every cycle with the phase that fully contains it.

    Cycles straddling a phase boundary, or lying outside all phases, go to GAP.
    """
    starts = np.asarray(starts, dtype=np.float64)
    ends = starts + np.asarray(durations, dtype=np.float64)
    labels = np.full(len(starts), GAP, dtype=object)
    for name, s, e in bounds:
        labels[(starts >= s) & (ends <= e)] = name
    return labels


def _overlaps(interval: tuple[float, float | None], start: float, end: float) -> bool:
    s, e = interval
    return s < end and (e is None or e > start)


def compare(artifacts: RunArtifacts | str | Path, thresholds: Thresholds | None = None) -> ComparisonReport:
    th = thresholds or Thresholds()
    art = artifacts if isinstance(artifacts, RunArtifacts) else RunArtifacts.load(artifacts)
    for name in (art.trace, art.probes):
        if not art.file(name).exists():
            raise AnalysisError(f"missing artifact file {art.file(name)}")
    labels = art.channel_labels or None
    trace = import_trace(art.file(art.trace), labels)
    target = art.target

    try:
        q0 = trace.channel_index(target, "q0")
    except KeyError:
        q0 = 0
    cycles = cycle_times(detect_edges(trace, q0))
    phase_of = partition(cycles.starts, cycles.durations, art.phases)

    probe_cfg = ProbeConfig(**art.probe_config) if art.probe_config else ProbeConfig()
    probes = [r for r in read_probe_log(art.file(art.probes)) if r.target == target]
    whole = reachability_summary(probes, probe_cfg).get(target)
    intervals = whole.intervals if whole else []

    stim = resp = None
    if art.stimulus_period:
        try:
            stim = detect_edges(trace, trace.channel_index(target, "i0"))
            resp = detect_edges(trace, trace.channel_index(target, "q1"))
        except KeyError:
            stim = resp = None
    matched = response_times(stim, resp, art.response_window) if stim is not None else None

    results: dict[str, PhaseResult] = {}
    for name, s, e in art.phases:
        in_phase = [r for r in probes if s <= r.sent_at < e]
        summary = reachability_summary(in_phase, probe_cfg).get(target)
        if matched is not None:
            m = (matched.stimulus_times >= s) & (matched.stimulus_times < e)
            rstats = stats(matched.delays[m])
            um = matched.unmatched_times
            unmatched = int(np.count_nonzero((um >= s) & (um < e))) if len(um) else 0
        else:
            rstats, unmatched = CycleStats(0), 0
        results[name] = PhaseResult(
            name, s, e, stats(cycles.durations[phase_of == name]), summary,
            [iv for iv in intervals if _overlaps(iv, s, e)], rstats, unmatched)

    influenced, recovered = [], []
    pre, att, post = (results.get(p) for p in PHASES)
    if pre and att and pre.cycles.count and att.cycles.count:
        if att.cycles.mean > pre.cycles.mean * (1 + th.theta_mean):
            influenced.append(f"attack mean cycle {att.cycles.mean:.1f} us > pre-idle mean "
                              f"{pre.cycles.mean:.1f} us x {1 + th.theta_mean:g}")
        if att.cycles.max > pre.cycles.max * (1 + th.theta_max):
            influenced.append(f"attack max cycle {att.cycles.max:.1f} us > pre-idle max "
                              f"{pre.cycles.max:.1f} us x {1 + th.theta_max:g}")
    if att:
        for s, e in att.unreachable:
            end = "open" if e is None else f"{e:.0f}"
            influenced.append(f"unreachable interval [{s:.0f}, {end}] us overlaps attack phase")
        if att.unmatched_stimuli:
            influenced.append(f"{att.unmatched_stimuli} unmatched stimuli in attack phase")
    if pre and post:
        if not pre.cycles.count or not post.cycles.count:
            recovered.append("no cycle samples to compare pre-idle and post-idle")
        elif abs(post.cycles.mean - pre.cycles.mean) > th.theta_rec * pre.cycles.mean:
            recovered.append(f"post-idle mean cycle {post.cycles.mean:.1f} us not within "
                             f"{th.theta_rec:g} of pre-idle mean {pre.cycles.mean:.1f} us")
        for s, e in post.unreachable:
            end = "open" if e is None else f"{e:.0f}"
            recovered.append(f"unreachable interval [{s:.0f}, {end}] us overlaps post-idle phase")

    rows = [(str(lab), float(t), float(d)) for lab, t, d in zip(phase_of, cycles.starts, cycles.durations)]
    return ComparisonReport(art.test_id, target, results, bool(influenced), influenced,
                            not recovered, recovered, th, rows)


# -- emission ---------------------------------------------------------------------


def _num(v: float) -> str:
    if isinstance(v, int) or float(v).is_integer():
        return str(int(v))
    return f"{v:.3f}"


def emit(report: ComparisonReport, directory: str | Path, formats: Sequence[str] = ("csv", "svg", "text"),
         stem: str = "report") -> list[Path]:
    directory = Path(directory)
    written = []
    for fmt in formats:
        if fmt == "csv":
            path = directory / f"{stem}.csv"
            path.write_text(render_csv(report))
        elif fmt == "svg":
            path = directory / f"{stem}.svg"
            path.write_text(render_svg(report))
        elif fmt == "text":
            path = directory / f"{stem}.txt"
            path.write_text(render_text(report))
        else:
            raise ValueError(f"unknown report format {fmt!r}")
        written.append(path)
    return written


def stats_rows(report: ComparisonReport) -> list[tuple[str, str, str]]:
    rows = []
    for name, ph in report.phases.items():
        rows += [(name, k, _num(v)) for k, v in ph.cycles.rows()]
        if ph.reachability is not None:
            rows.append((name, "uptime", f"{ph.reachability.uptime:.6f}"))
        if ph.responses.count:
            rows += [(name, f"response_{k}", _num(v)) for k, v in ph.responses.rows()]
            rows.append((name, "unmatched_stimuli", str(ph.unmatched_stimuli)))
    return rows


def render_csv(report: ComparisonReport) -> str:
    lines = [",".join(r) for r in stats_rows(report)]
    lines += [f"{p},{t:.3f},{d:.3f}" for p, t, d in report.cycle_rows]
    return "\n".join(lines) + "\n"


def render_text(report: ComparisonReport) -> str:
    th = report.thresholds
    out = [f"test {report.test_id} target {report.target}"]
    for name, ph in report.phases.items():
        c = ph.cycles
        line = f"  {name:<9} [{ph.start:.0f}, {ph.end:.0f}) us  cycles={c.count}"
        if c.count:
            line += f" mean={c.mean:.1f} min={c.min:.1f} max={c.max:.1f} p99={c.p99:.1f} us"
        if ph.reachability is not None:
            line += f" uptime={ph.reachability.uptime:.3f}"
        if ph.responses.count:
            line += f" response_mean={ph.responses.mean:.1f} us unmatched={ph.unmatched_stimuli}"
        out.append(line)
    out.append(f"influenced: {str(report.influenced).lower()}")
    out += [f"  - {r}" for r in report.influenced_reasons]
    out.append(f"recovered: {str(report.recovered).lower()}")
    out += [f"  - {r}" for r in report.recovered_reasons]
    out.append(f"thresholds: theta_mean={th.theta_mean:g} theta_max={th.theta_max:g} theta_rec={th.theta_rec:g}")
    return "\n".join(out) + "\n"


def render_svg(report: ComparisonReport, width: int = 900, height: int = 400) -> str:
    """Scatter of cycle time against cycle start, one colour per phase."""
    ml, mr, mt, mb = 70, 20, 20, 50
    rows = report.cycle_rows
    pw, ph = width - ml - mr, height - mt - mb
    if rows:
        xs = [t for _, t, _ in rows]
        ys = [d for _, _, d in rows]
        x0, x1 = min(xs), max(xs)
        y0, y1 = 0.0, max(ys) * 1.1
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def sx(t: float) -> float:
        return ml + (t - x0) / (x1 - x0) * pw

    def sy(d: float) -> float:
        return mt + ph - (d - y0) / (y1 - y0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'data-x0-us="{x0:.3f}" data-x1-us="{x1:.3f}" data-y0-us="{y0:.3f}" data-y1-us="{y1:.3f}" '
        f'data-plot="{ml} {mt} {pw} {ph}">',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for k in range(6):
        v = y0 + (y1 - y0) * k / 5
        parts.append(f'<text x="{ml - 6}" y="{sy(v) + 4:.1f}" font-size="10" text-anchor="end">{v:.0f}</text>')
    for k in range(6):
        v = x0 + (x1 - x0) * k / 5
        parts.append(f'<text x="{sx(v):.1f}" y="{mt + ph + 14}" font-size="10" text-anchor="middle">{v:.0f}</text>')
    parts.append(f'<text x="{ml + pw / 2}" y="{height - 10}" font-size="12" text-anchor="middle">'
                 f'cycle start (µs)</text>')
    parts.append(f'<text x="15" y="{mt + ph / 2}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 15 {mt + ph / 2})">cycle time (µs)</text>')
    for phase in (*PHASES, GAP):
        pts = [(t, d) for p, t, d in rows if p == phase]
        if not pts:
            continue
        parts.append(f'<g class="{phase}" fill="{PHASE_COLORS[phase]}">')
        parts += [f'<circle cx="{sx(t):.2f}" cy="{sy(d):.2f}" r="1"/>' for t, d in pts]
        parts.append("</g>")
    for i, phase in enumerate(PHASES):
        parts.append(f'<text x="{ml + 10 + i * 110}" y="{mt + 14}" font-size="11" '
                     f'fill="{PHASE_COLORS[phase]}">{phase}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def analyze_run(directory: str | Path, thresholds: Thresholds | None = None) -> ComparisonReport:
    """Recompute and write the report for a finished test directory."""
    art = RunArtifacts.load(directory)
    report = compare(art, thresholds)
    emit(report, art.path, stem=art.report)
    return report
