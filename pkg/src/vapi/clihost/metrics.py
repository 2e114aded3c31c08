"""Line-delimited JSON metric records.

Wall-clock time is kept in a sidecar file next to the metrics so that the
metrics themselves are a pure function of (config, seed) and can be compared
bitwise across runs.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class MetricRecord:
    step: int
    stage: str
    scalars: dict
    wall_ms: float = 0.0

    def to_line(self) -> str:
        return json.dumps({"step": self.step, "stage": self.stage, "scalars": _clean(self.scalars)},
                          sort_keys=True, allow_nan=False)


def _clean(scalars: dict) -> dict:
    out = {}
    for k, v in scalars.items():
        v = float(v) if not isinstance(v, (int, str)) else v
        if isinstance(v, float) and not math.isfinite(v):
            v = str(v)  # "inf" / "nan" survive as strings; JSON has no literal for them
        out[k] = v
    return out


class MetricLog:
    def __init__(self, run_dir: str | Path, stage: str):
        self.stage = stage
        self.path = Path(run_dir) / "metrics" / f"{stage}.jsonl"
        self.timing_path = Path(run_dir) / "timing" / f"{stage}.jsonl"
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.timing_path.parent.mkdir(parents=True, exist_ok=True)
        self._last_step = -1

    def reset(self, keep_before: int = 0) -> None:
        """Drop records with ``step >= keep_before`` (all of them when 0)."""
        for p in (self.path, self.timing_path):
            if not p.exists():
                continue
            kept = [ln for ln in p.read_text().splitlines() if json.loads(ln)["step"] < keep_before]
            p.write_text("".join(ln + "\n" for ln in kept))
        self._last_step = keep_before - 1

    def append(self, record: MetricRecord) -> None:
        if record.step <= self._last_step:
            raise ValueError("metric records must be appended in increasing step order")
        self._last_step = record.step
        with self.path.open("a") as fh:
            fh.write(record.to_line() + "\n")
        with self.timing_path.open("a") as fh:
            fh.write(json.dumps({"step": record.step, "wall_ms": round(record.wall_ms, 3)}) + "\n")

    def log(self, step: int, scalars: dict, wall_ms: float = 0.0) -> None:
        self.append(MetricRecord(step, self.stage, scalars, wall_ms))


def read_records(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(ln) for ln in path.read_text().splitlines() if ln.strip()]


def total_wall_seconds(run_dir: str | Path, stage: str) -> float:
    recs = read_records(Path(run_dir) / "timing" / f"{stage}.jsonl")
    return sum(r["wall_ms"] for r in recs) / 1000.0
