"""Per-test artifact bundle, persisted as ``run.json`` next to the data files."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

PHASES = ("pre_idle", "attack", "post_idle")

TRACE_FILE = "trace.csv"
PROBES_FILE = "probes.csv"
ATTACK_FILE = "attack.csv"
MANIFEST_FILE = "manifest.json"
RUN_FILE = "run.json"
REPORT_STEM = "report"


@dataclass
class RunArtifacts:
    test_id: int
    directory: str
    target: str
    attack: dict
    phases: list[tuple[str, float, float]] = field(default_factory=list)
    transitions: list[str] = field(default_factory=list)
    status: str = "running"  # running | complete | aborted
    error: str | None = None
    warnings: list[str] = field(default_factory=list)
    channel_labels: list[tuple[str, str]] = field(default_factory=list)
    probe_config: dict = field(default_factory=dict)
    response_window: float = 50_000.0  # us
    stimulus_period: float | None = None  # us
    device_events: list[tuple[float, str, str]] = field(default_factory=list)
    seed: int = 0
    trace: str = TRACE_FILE
    probes: str = PROBES_FILE
    capture_manifest: str = MANIFEST_FILE
    attack_log: str = ATTACK_FILE
    report: str = REPORT_STEM

    @property
    def path(self) -> Path:
        return Path(self.directory)

    def phase(self, name: str) -> tuple[float, float]:
        for n, s, e in self.phases:
            if n == name:
                return s, e
        raise KeyError(name)

    def file(self, name: str) -> Path:
        return self.path / name

    def save(self) -> None:
        data = asdict(self)
        data.pop("directory")
        (self.path / RUN_FILE).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> RunArtifacts:
        directory = Path(directory)
        path = directory / RUN_FILE
        if not path.exists():
            raise FileNotFoundError(f"missing artifact file {path}")
        data = json.loads(path.read_text())
        data["phases"] = [tuple(p) for p in data.get("phases", [])]
        data["channel_labels"] = [tuple(c) for c in data.get("channel_labels", [])]
        data["device_events"] = [tuple(e) for e in data.get("device_events", [])]
        return cls(directory=str(directory), **data)
