"""Comparison tables: one row per (task, method)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence


@dataclass
class ReportRow:
    task: str
    method: str
    trained_with: str
    metric: str
    capacity_params: int
    expected_active_params: float
    score: float
    low: float
    high: float
    n: int
    by_knob: dict[int, float] = field(default_factory=dict)
    rank_histogram: dict[int, int] = field(default_factory=dict)

    @classmethod
    def from_summary(cls, task: str, trained_with: str, s) -> ReportRow:
        return cls(
            task,
            s.policy,
            trained_with,
            s.metric,
            s.capacity_params,
            s.expected_active_params,
            s.mean,
            s.by_split["low"],
            s.by_split["high"],
            s.n,
            dict(s.by_knob),
            dict(s.rank_histogram),
        )

    def to_json(self) -> dict:
        d = asdict(self)
        d["by_knob"] = {str(k): v for k, v in sorted(self.by_knob.items())}
        d["rank_histogram"] = {str(k): v for k, v in sorted(self.rank_histogram.items())}
        return d

    @classmethod
    def from_json(cls, d: dict) -> ReportRow:
        d = dict(d)
        d["by_knob"] = {int(k): v for k, v in d["by_knob"].items()}
        d["rank_histogram"] = {int(k): v for k, v in d["rank_histogram"].items()}
        return cls(**d)


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _hist(h: dict[int, int]) -> str:
    return " ".join(f"{r}:{c}" for r, c in sorted(h.items()))


def to_csv(rows: Sequence[ReportRow]) -> str:
    knobs = sorted({k for r in rows for k in r.by_knob})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["task", "method", "trained_with", "metric", "capacity_params", "expected_active_params", "score", "low", "high", "n"]
        + [f"knob_{k}" for k in knobs]
        + ["rank_histogram"]
    )
    for r in rows:
        w.writerow(
            [r.task, r.method, r.trained_with, r.metric, r.capacity_params, f"{r.expected_active_params:.1f}"]
            + [_fmt(r.score), _fmt(r.low), _fmt(r.high), r.n]
            + [_fmt(r.by_knob[k]) if k in r.by_knob else "" for k in knobs]
            + [_hist(r.rank_histogram)]
        )
    return buf.getvalue()


def to_text(rows: Sequence[ReportRow]) -> str:
    header = ["task", "method", "params", "E[active]", "score", "low", "high", "ranks"]
    body = [
        [r.task, r.method, str(r.capacity_params), f"{r.expected_active_params:.0f}"]
        + [f"{100 * v:.2f}" for v in (r.score, r.low, r.high)]
        + [_hist(r.rank_histogram)]
        for r in rows
    ]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def to_pareto(rows: Sequence[ReportRow]) -> str:
    """Two columns, expected active parameters and score, for trade-off plots."""
    lines = ["expected_active_params,score"]
    lines += [f"{r.expected_active_params:.1f},{_fmt(r.score)}" for r in rows]
    return "\n".join(lines) + "\n"


def emit_report(rows: Sequence[ReportRow], out: str | Path) -> dict[str, Path]:
    if not rows:
        raise ValueError("report needs at least one evaluated method")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "csv": (out / "report.csv", to_csv(rows)),
        "text": (out / "report.txt", to_text(rows)),
        "pareto": (out / "pareto.csv", to_pareto(rows)),
        "json": (out / "report.json", json.dumps([r.to_json() for r in rows], sort_keys=True, indent=1) + "\n"),
    }
    for path, content in files.values():
        path.write_text(content, encoding="utf-8")
    return {k: p for k, (p, _) in files.items()}


def load_rows(path: str | Path) -> list[ReportRow]:
    return [ReportRow.from_json(d) for d in json.loads(Path(path).read_text())]
