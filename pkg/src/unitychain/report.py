"""Report files: one CSV row per cycle plus a JSON summary."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .metrics import COLUMNS, MetricsReport


def _cell(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def render_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in report.rows:
        writer.writerow([_cell(getattr(row, c)) for c in COLUMNS])
    return buf.getvalue()


def summary(report: MetricsReport) -> dict:
    rows = report.rows
    out: dict = {
        "horizon": report.horizon,
        "seed": report.seed,
        "submitted": sum(r.submitted for r in rows),
        "throughput": sum(r.throughput for r in rows),
        "blocks_pos": sum(r.blocks_pos for r in rows),
        "blocks_neg": sum(r.blocks_neg for r in rows),
        "downtime_cycles": report.downtime_cycles,
        "pending_at_horizon": rows[-1].pending if rows else 0,
        "epochs": len(report.reshuffle_durations),
        "reshuffle_durations": report.reshuffle_durations,
        "shuffle_distance_mean": None if report.shuffle_mean is None else round(report.shuffle_mean, 6),
        "violations": report.violations,
    }
    if report.coalition is not None:
        c = report.coalition
        out["coalition"] = {
            "members": list(c.coalition),
            "majority_fraction": round(c.majority_fraction, 6),
            "leader_capture_rate": round(c.leader_capture_rate, 6),
            "leader_slots": c.leader_slots,
            "max_streak": c.max_streak,
        }
    return out


def render_summary(report: MetricsReport) -> str:
    return json.dumps(summary(report), indent=2, sort_keys=True) + "\n"


def emit_report(report: MetricsReport, out_dir: str | Path) -> list[Path]:
    """Write metrics.csv and summary.json; raises OSError if the path is unwritable."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "metrics.csv", out / "summary.json"]
    files[0].write_text(render_csv(report))
    files[1].write_text(render_summary(report))
    return files
