from __future__ import annotations

import csv
import io
import json

import pytest

from unitychain.metrics import (
    COLUMNS,
    TruncatedLogError,
    build_report,
    coalition_control_probability,
    compute_downtime,
    compute_shuffle_entropy,
    reshuffle_durations,
)
from unitychain.report import emit_report, render_csv, render_summary, summary
from unitychain.scenario import ScenarioConfig, Workload
from unitychain.simnet import run_simulation


@pytest.fixture(scope="module")
def run():
    return run_simulation(ScenarioConfig(node_count=8, horizon=50, seed=21))


def test_downtime_zero_on_honest_run(run):
    assert compute_downtime(run.log) == 0


def test_downtime_vacuous_without_transactions():
    result = run_simulation(ScenarioConfig(node_count=4, horizon=10, seed=1, workload=Workload("fixed", 0)))
    assert compute_downtime(result.log) == 0


def test_truncated_logs_rejected(run):
    with pytest.raises(TruncatedLogError):
        compute_downtime(run.log[:-1])
    with pytest.raises(TruncatedLogError):
        compute_downtime(run.log[1:])
    with pytest.raises(TruncatedLogError):
        build_report([])
    cut = [r for r in run.log if not (r["type"] == "cycle-end" and r["cycle"] == 7)]
    with pytest.raises(TruncatedLogError):
        build_report(cut)


def test_shuffle_series_in_range(run):
    series, mean = compute_shuffle_entropy(run.log)
    values = [d for s in series.values() for _, d in s]
    assert values and all(0.0 <= d <= 1.0 for d in values)
    assert 0.3 < mean < 0.7


def test_coalition_of_everyone(run):
    everyone = run.log[0]["universe"]
    c = coalition_control_probability(run.log, everyone)
    assert c.leader_capture_rate == 1.0 and c.majority_fraction == 1.0
    # every leadership slot of a strand is captured, so the streak is the
    # strand's total number of slots
    starts = [r for r in run.log if r["type"] == "cycle-start"]
    slots = {s: sum(1 for r in starts if s in r["leaders"]) for s in ("+", "-")}
    assert c.max_streak == max(slots.values())


def test_coalition_errors(run):
    with pytest.raises(ValueError):
        coalition_control_probability(run.log, [])
    with pytest.raises(ValueError):
        coalition_control_probability(run.log, ["zzz"])


def test_single_node_coalition(run):
    c = coalition_control_probability(run.log, ["n000"])
    assert c.majority_fraction == 0.0
    assert 0.0 <= c.leader_capture_rate < 0.5
    assert c.leader_slots >= 50


def test_reshuffle_durations(run):
    durations = reshuffle_durations(run.log)
    geneses = [r for r in run.log if r["type"] == "block" and r["block"]["kind"] == "genesis"]
    assert len(durations) == len(geneses) - 1 >= 3
    assert all(d >= 3 for d in durations)


def test_csv_shape_and_totals(run):
    report = build_report(run.log)
    text = render_csv(report)
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == 50
    assert tuple(rows[0]) == COLUMNS
    s = summary(report)
    assert s["throughput"] == sum(int(r["throughput"]) for r in rows)
    assert s["submitted"] == sum(int(r["submitted"]) for r in rows)
    assert s["downtime_cycles"] == sum(int(r["downtime"]) for r in rows)
    assert s["blocks_pos"] == sum(int(r["blocks_pos"]) for r in rows)


def test_throughput_never_exceeds_arrivals(run):
    report = build_report(run.log)
    arrived = done = 0
    for row in report.rows:
        arrived += row.submitted
        done += row.throughput
        assert done <= arrived
        assert arrived - done == row.pending


def test_reports_are_reproducible(run, tmp_path):
    a = emit_report(build_report(run.log, ["n000", "n001"]), tmp_path / "a")
    b = emit_report(build_report(run.log, ["n000", "n001"]), tmp_path / "b")
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]
    assert json.loads(a[1].read_text())["coalition"]["members"] == ["n000", "n001"]


def test_unwritable_output(run, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(build_report(run.log), blocker / "sub")


def test_summary_is_sorted_json(run):
    text = render_summary(build_report(run.log))
    assert json.loads(text)["horizon"] == 50
    assert text == json.dumps(json.loads(text), indent=2, sort_keys=True) + "\n"
