"""Metrics computed from an event log alone."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .chain import CycleBlock, EpochBlock, EpochGenesisBlock, block_from_record
from .topology import STRANDS, Strand, kendall_distance, majority_threshold


class TruncatedLogError(ValueError):
    """The log is missing its header, its end record or some cycles."""


@dataclass(frozen=True)
class CycleRow:
    cycle: int
    submitted: int
    pending: int
    blocks_pos: int
    blocks_neg: int
    throughput: int
    downtime: int
    partition: str
    leader_pos: str
    leader_neg: str
    shuffle_pos: float | None
    shuffle_neg: float | None


COLUMNS = tuple(CycleRow.__dataclass_fields__)


@dataclass(frozen=True)
class CoalitionControl:
    coalition: tuple[str, ...]
    majority_fraction: float
    leader_capture_rate: float
    leader_slots: int
    max_streak: int


@dataclass
class MetricsReport:
    horizon: int
    seed: int
    rows: list[CycleRow]
    downtime_cycles: int
    reshuffle_durations: list[int]
    shuffle_distance: dict[str, list[float]]
    shuffle_mean: float | None
    violations: list[str] = field(default_factory=list)
    coalition: CoalitionControl | None = None

    @property
    def throughput(self) -> list[int]:
        return [r.throughput for r in self.rows]


def _check(log: Sequence[dict]) -> tuple[dict, list[dict], list[dict], dict]:
    if not log or log[0].get("type") != "run":
        raise TruncatedLogError("log has no run header")
    if log[-1].get("type") != "end":
        raise TruncatedLogError("log has no end record")
    header = log[0]
    horizon = header["scenario"]["horizon"]
    starts = [r for r in log if r["type"] == "cycle-start"]
    ends = [r for r in log if r["type"] == "cycle-end"]
    if [r["cycle"] for r in starts] != list(range(horizon)) or [r["cycle"] for r in ends] != list(range(horizon)):
        raise TruncatedLogError(f"log does not cover cycles 0..{horizon - 1}")
    return header, starts, ends, log[-1]


def _blocks(log: Iterable[dict]):
    return [block_from_record(r["block"]) for r in log if r["type"] == "block"]


def _blocks_per_cycle(log: Sequence[dict], horizon: int) -> dict[Strand, list[int]]:
    counts = {s: [0] * horizon for s in STRANDS}
    for b in _blocks(log):
        if isinstance(b, CycleBlock) and 0 <= b.cycle < horizon:
            counts[b.strand][b.cycle] += 1
    return counts


def compute_downtime(log: Sequence[dict]) -> int:
    """Cycles in which no strand finalized a block while transactions waited."""
    header, _, ends, _ = _check(log)
    horizon = header["scenario"]["horizon"]
    counts = _blocks_per_cycle(log, horizon)
    return sum(
        1
        for c in range(horizon)
        if all(counts[s][c] == 0 for s in STRANDS) and ends[c]["pending"] > 0
    )


def compute_shuffle_entropy(log: Sequence[dict]) -> tuple[dict[str, list[tuple[int, float]]], float | None]:
    """Normalised Kendall distance of each cycle block's configuration from
    the one that preceded it on its strand; returns (series, mean)."""
    blocks = _blocks(log)
    basis: dict[Strand, tuple[str, ...]] = {}
    series: dict[str, list[tuple[int, float]]] = {s.value: [] for s in STRANDS}
    for b in blocks:
        if isinstance(b, EpochGenesisBlock):
            # the next block on either strand permutes the fresh configuration
            for c in b.new_configurations:
                basis[c.strand] = c.members
        elif isinstance(b, CycleBlock) and b.configuration is not None:
            prev = basis.get(b.strand)
            if prev is not None:
                series[b.strand.value].append((b.cycle, kendall_distance(prev, b.configuration.members)))
            basis[b.strand] = b.configuration.members
    values = [d for s in series.values() for _, d in s]
    return series, (sum(values) / len(values) if values else None)


def coalition_control_probability(log: Sequence[dict], coalition: Iterable[str]) -> CoalitionControl:
    """Majority fraction, leader-capture rate and longest leader streak.

    The streak counts consecutive leadership slots of one strand held by
    the coalition; the longest over both strands is reported."""
    members = tuple(sorted(set(coalition)))
    if not members:
        raise ValueError("coalition must name at least one node")
    header, starts, _, _ = _check(log)
    universe = set(header["universe"])
    unknown = [m for m in members if m not in universe]
    if unknown:
        raise ValueError(f"coalition names nodes outside the universe: {', '.join(unknown)}")
    coal = set(members)
    majority_cycles = 0
    slots = captured = 0
    best = 0
    streak = {s.value: 0 for s in STRANDS}
    for rec in starts:
        configs = rec["configs"]
        if any(len(coal & set(m)) >= majority_threshold(len(m)) for m in configs.values() if m):
            majority_cycles += 1
        for s in streak:
            leader = rec["leaders"].get(s)
            if leader is None:
                # a reshuffling strand has no slot this cycle; nobody else
                # took the position, so the streak carries over
                continue
            slots += 1
            if leader in coal:
                captured += 1
                streak[s] += 1
                best = max(best, streak[s])
            else:
                streak[s] = 0
    horizon = len(starts)
    return CoalitionControl(
        members,
        majority_cycles / horizon if horizon else 0.0,
        captured / slots if slots else 0.0,
        slots,
        best,
    )


def reshuffle_durations(log: Sequence[dict]) -> list[int]:
    opened: dict[int, int] = {}
    out = []
    for b in _blocks(log):
        if isinstance(b, EpochBlock):
            opened[b.epoch] = b.cycle
        elif isinstance(b, EpochGenesisBlock) and b.epoch in opened:
            out.append(b.cycle - opened[b.epoch])
    return out


def build_report(log: Sequence[dict], coalition: Iterable[str] | None = None) -> MetricsReport:
    header, starts, ends, end = _check(log)
    scenario = header["scenario"]
    horizon = scenario["horizon"]
    counts = _blocks_per_cycle(log, horizon)
    throughput = [0] * horizon
    for b in _blocks(log):
        if isinstance(b, CycleBlock) and 0 <= b.cycle < horizon:
            throughput[b.cycle] += len(b.tx_summary)
    series, mean = compute_shuffle_entropy(log)
    per_cycle = {s: dict(series[s]) for s in series}
    rows = []
    for c in range(horizon):
        pos, neg = counts[Strand.POSITIVE][c], counts[Strand.NEGATIVE][c]
        pending = ends[c]["pending"]
        leaders = starts[c]["leaders"]
        rows.append(
            CycleRow(
                cycle=c,
                submitted=starts[c]["submitted"],
                pending=pending,
                blocks_pos=pos,
                blocks_neg=neg,
                throughput=throughput[c],
                downtime=int(pos + neg == 0 and pending > 0),
                partition=ends[c]["partition"],
                leader_pos=leaders.get("+", ""),
                leader_neg=leaders.get("-", ""),
                shuffle_pos=per_cycle["+"].get(c),
                shuffle_neg=per_cycle["-"].get(c),
            )
        )
    report = MetricsReport(
        horizon=horizon,
        seed=scenario["seed"],
        rows=rows,
        downtime_cycles=sum(r.downtime for r in rows),
        reshuffle_durations=reshuffle_durations(log),
        shuffle_distance={s: [d for _, d in v] for s, v in series.items()},
        shuffle_mean=mean,
        violations=list(end.get("violations", [])),
    )
    if coalition:
        report.coalition = coalition_control_probability(log, coalition)
    return report
