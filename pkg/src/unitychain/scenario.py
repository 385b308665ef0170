"""Scenario description: the TOML experiment file and its validated form."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .chain import ProtocolParams, ShuffleMode
from .topology import KEY_SPACE, MIN_CONFIGURATION, KeyRangePartition, Strand, check_partition, majority_threshold

MAX_NODES = 512


class ScenarioError(ValueError):
    """Raised with every problem found in a scenario, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass(frozen=True)
class Transaction:
    key: int
    digest: bytes
    submitted_at: int


@dataclass(frozen=True)
class LatencyModel:
    mode: str = "uniform"  # "constant" | "uniform"
    lo: int = 1
    hi: int = 8


@dataclass(frozen=True)
class Workload:
    arrival: str = "fixed"  # "fixed" | "poisson"
    rate: float = 10


class Behavior(str, Enum):
    CRASH = "crash"
    SILENT = "silent"
    EQUIVOCATE = "equivocate"
    COLLUDER = "colluder"


@dataclass(frozen=True)
class FaultSpec:
    node: str
    behavior: Behavior
    at_cycle: int = 0
    coalition_id: str = ""


@dataclass(frozen=True)
class ChurnEvent:
    cycle: int
    node: str
    action: str  # "join" | "leave"


@dataclass(frozen=True)
class ScenarioConfig:
    node_count: int = 8
    strand_count: int = 2
    cycles_per_epoch: int = 10
    reshuffle_duration: int = 3
    join_threshold: int = 2
    cycle_ticks: int = 100
    horizon: int = 100
    seed: int = 0
    latency: LatencyModel = LatencyModel()
    workload: Workload = Workload()
    partition: KeyRangePartition = field(default_factory=KeyRangePartition.parity)
    shuffle: ShuffleMode = ShuffleMode.CYCLE
    shuffle_every: int = 1
    faults: tuple[FaultSpec, ...] = ()
    churn: tuple[ChurnEvent, ...] = ()
    coalition: tuple[str, ...] = ()

    @property
    def protocol_params(self) -> ProtocolParams:
        return ProtocolParams(
            cycles_per_epoch=self.cycles_per_epoch,
            reshuffle_duration=self.reshuffle_duration,
            join_threshold=self.join_threshold,
            strand_count=self.strand_count,
            cycle_ticks=self.cycle_ticks,
            shuffle=self.shuffle,
            shuffle_every=self.shuffle_every,
        )

    @property
    def initial_members(self) -> tuple[str, ...]:
        return tuple(node_name(i) for i in range(self.node_count))

    @property
    def universe(self) -> tuple[str, ...]:
        names = set(self.initial_members) | {c.node for c in self.churn} | {f.node for f in self.faults}
        return tuple(sorted(names))

    def with_seed(self, seed: int) -> ScenarioConfig:
        return _replace(self, seed=seed)

    def problems(self) -> list[str]:
        return _problems(self)

    def validate(self) -> ScenarioConfig:
        problems = self.problems()
        if problems:
            raise ScenarioError(problems)
        return self


def _replace(cfg: ScenarioConfig, **kw: Any) -> ScenarioConfig:
    return replace(cfg, **kw)


def node_name(i: int) -> str:
    return f"n{i:03d}"


def _is_node_name(name: object) -> bool:
    return isinstance(name, str) and len(name) == 4 and name[0] == "n" and name[1:].isdigit()


def _problems(cfg: ScenarioConfig) -> list[str]:
    p: list[str] = []

    def bound(name: str, value: int, lo: int, hi: int | None = None) -> None:
        if not isinstance(value, int) or isinstance(value, bool):
            p.append(f"{name} must be an integer")
        elif value < lo or (hi is not None and value > hi):
            rng = f">= {lo}" if hi is None else f"in [{lo}, {hi}]"
            p.append(f"{name}={value} out of range: must be {rng}")

    bound("node_count", cfg.node_count, MIN_CONFIGURATION, MAX_NODES)
    if cfg.strand_count != 2:
        p.append(f"strand_count={cfg.strand_count} unsupported: only 2 strands are implemented")
    bound("cycles_per_epoch", cfg.cycles_per_epoch, 1)
    bound("reshuffle_duration", cfg.reshuffle_duration, 1)
    bound("join_threshold", cfg.join_threshold, 0)
    bound("cycle_ticks", cfg.cycle_ticks, 20)
    bound("horizon", cfg.horizon, 1)
    bound("seed", cfg.seed, 0, 2**64 - 1)
    bound("shuffle_every", cfg.shuffle_every, 1)
    lat = cfg.latency
    if lat.mode not in ("constant", "uniform"):
        p.append(f"latency={lat.mode!r} unknown: use 'constant' or 'uniform'")
    bound("latency_lo", lat.lo, 1)
    bound("latency_hi", lat.hi, 1)
    if isinstance(lat.lo, int) and isinstance(lat.hi, int) and lat.lo > lat.hi:
        p.append("latency_lo must not exceed latency_hi")
    # five sequential hops (epoch and genesis flows) must fit in half a cycle
    if isinstance(lat.hi, int) and isinstance(cfg.cycle_ticks, int) and 10 * lat.hi + 2 > cfg.cycle_ticks:
        p.append(f"latency_hi={lat.hi} too large for cycle_ticks={cfg.cycle_ticks}: need 10*latency_hi + 2 <= cycle_ticks")
    if cfg.workload.arrival not in ("fixed", "poisson"):
        p.append(f"workload={cfg.workload.arrival!r} unknown: use 'fixed' or 'poisson'")
    if not isinstance(cfg.workload.rate, (int, float)) or cfg.workload.rate < 0:
        p.append("tx_per_cycle must be a non-negative number")
    elif cfg.workload.arrival == "fixed" and int(cfg.workload.rate) != cfg.workload.rate:
        p.append("tx_per_cycle must be an integer for fixed arrivals")
    reason = check_partition(cfg.partition)
    if reason:
        p.append(f"partition invalid: {reason}")
    if isinstance(cfg.node_count, int) and isinstance(cfg.join_threshold, int) and cfg.node_count >= 1:
        # worst case: maximal departures and a full intake of joiners; the
        # carried-over nodes must still be a signing majority
        kept = majority_threshold(cfg.node_count)
        if kept < majority_threshold(kept + cfg.join_threshold):
            p.append(
                f"join_threshold={cfg.join_threshold} violates carryover feasibility for node_count={cfg.node_count}:"
                f" {kept} carried-over nodes would not be a majority of {kept + cfg.join_threshold}"
            )
    seen: set[str] = set()
    for f in cfg.faults:
        if not _is_node_name(f.node):
            p.append(f"fault node {f.node!r} is not a node name like 'n003'")
        if f.node in seen:
            p.append(f"duplicate fault on node {f.node}")
        seen.add(f.node)
        bound(f"fault at_cycle for {f.node}", f.at_cycle, 0)
    for c in cfg.churn:
        if not _is_node_name(c.node):
            p.append(f"churn node {c.node!r} is not a node name like 'n003'")
        if c.action not in ("join", "leave"):
            p.append(f"churn action {c.action!r} unknown: use 'join' or 'leave'")
        bound(f"churn cycle for {c.node}", c.cycle, 0)
    for name in cfg.coalition:
        if not _is_node_name(name):
            p.append(f"coalition member {name!r} is not a node name")
    return p


_FLAT_KEYS = {
    "node_count",
    "strand_count",
    "cycles_per_epoch",
    "reshuffle_duration",
    "join_threshold",
    "cycle_ticks",
    "horizon",
    "seed",
    "latency",
    "latency_lo",
    "latency_hi",
    "workload",
    "tx_per_cycle",
    "partition",
    "ranges",
    "shuffle",
    "shuffle_every",
    "coalition",
    "faults",
    "churn",
}
_FAULT_KEYS = {"node", "behavior", "at_cycle", "coalition_id"}
_CHURN_KEYS = {"cycle", "node", "action"}


def _int(value: Any) -> Any:
    if isinstance(value, str):
        try:
            return int(value, 0)
        except ValueError:
            return value
    return value


def parse_scenario(text: str) -> ScenarioConfig:
    """Parse and validate a TOML scenario; raises ScenarioError listing every problem."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError([f"not valid TOML: {exc}"]) from None
    problems: list[str] = []
    for key in sorted(set(raw) - _FLAT_KEYS):
        problems.append(f"unknown key {key!r}")
    defaults = ScenarioConfig()
    kw: dict[str, Any] = {}
    for f in fields(ScenarioConfig):
        if f.name in raw and f.name in {
            "node_count",
            "strand_count",
            "cycles_per_epoch",
            "reshuffle_duration",
            "join_threshold",
            "cycle_ticks",
            "horizon",
            "seed",
            "shuffle_every",
        }:
            kw[f.name] = _int(raw[f.name])
    kw["latency"] = LatencyModel(
        raw.get("latency", defaults.latency.mode),
        raw.get("latency_lo", defaults.latency.lo),
        raw.get("latency_hi", defaults.latency.hi),
    )
    kw["workload"] = Workload(raw.get("workload", defaults.workload.arrival), raw.get("tx_per_cycle", defaults.workload.rate))

    mode = raw.get("partition", "parity")
    if mode == "parity":
        if "ranges" in raw:
            problems.append("partition declares both 'parity' and 'ranges': exactly one mode is allowed")
        kw["partition"] = KeyRangePartition.parity()
    elif mode == "ranges":
        spans = []
        for entry in raw.get("ranges", []):
            try:
                lo, hi, strand = entry
                spans.append((_int(lo), _int(hi) + 1, Strand(strand)))
            except (TypeError, ValueError):
                problems.append(f"range entry {entry!r} must be [lo, hi_inclusive, '+'|'-']")
        if not spans:
            problems.append("partition 'ranges' needs a non-empty 'ranges' list")
        elif all(isinstance(lo, int) and isinstance(hi, int) for lo, hi, _ in spans):
            if any(lo < 0 or hi > KEY_SPACE for lo, hi, _ in spans):
                problems.append("ranges must lie within the 64-bit key space")
            kw["partition"] = KeyRangePartition.ranges(spans)
    else:
        problems.append(f"partition={mode!r} unknown: use 'parity' or 'ranges'")

    shuffle = raw.get("shuffle", "cycle")
    try:
        kw["shuffle"] = ShuffleMode(shuffle)
    except ValueError:
        problems.append(f"shuffle={shuffle!r} unknown: use 'cycle', 'epoch' or 'never'")

    faults = []
    for i, entry in enumerate(raw.get("faults", [])):
        if not isinstance(entry, dict):
            problems.append(f"faults[{i}] must be a table")
            continue
        for key in sorted(set(entry) - _FAULT_KEYS):
            problems.append(f"faults[{i}]: unknown key {key!r}")
        try:
            behavior = Behavior(entry.get("behavior"))
        except ValueError:
            problems.append(f"faults[{i}]: behavior {entry.get('behavior')!r} unknown")
            continue
        if "node" not in entry:
            problems.append(f"faults[{i}]: missing 'node'")
            continue
        faults.append(FaultSpec(entry["node"], behavior, _int(entry.get("at_cycle", 0)), str(entry.get("coalition_id", ""))))
    kw["faults"] = tuple(faults)

    churn = []
    for i, entry in enumerate(raw.get("churn", [])):
        if not isinstance(entry, dict):
            problems.append(f"churn[{i}] must be a table")
            continue
        for key in sorted(set(entry) - _CHURN_KEYS):
            problems.append(f"churn[{i}]: unknown key {key!r}")
        missing = sorted(_CHURN_KEYS - set(entry))
        if missing:
            problems.append(f"churn[{i}]: missing {', '.join(missing)}")
            continue
        churn.append(ChurnEvent(_int(entry["cycle"]), entry["node"], entry["action"]))
    kw["churn"] = tuple(sorted(churn, key=lambda c: (c.cycle, c.node, c.action)))
    kw["coalition"] = tuple(raw.get("coalition", ()))

    cfg = ScenarioConfig(**kw)
    problems.extend(cfg.problems())
    if problems:
        raise ScenarioError(problems)
    return cfg


def scenario_record(cfg: ScenarioConfig) -> dict:
    """Stable JSON form, embedded in the event log header for replay."""
    from .chain import partition_record

    return {
        "node_count": cfg.node_count,
        "strand_count": cfg.strand_count,
        "cycles_per_epoch": cfg.cycles_per_epoch,
        "reshuffle_duration": cfg.reshuffle_duration,
        "join_threshold": cfg.join_threshold,
        "cycle_ticks": cfg.cycle_ticks,
        "horizon": cfg.horizon,
        "seed": cfg.seed,
        "latency": [cfg.latency.mode, cfg.latency.lo, cfg.latency.hi],
        "workload": [cfg.workload.arrival, cfg.workload.rate],
        "partition": partition_record(cfg.partition),
        "shuffle": cfg.shuffle.value,
        "shuffle_every": cfg.shuffle_every,
        "faults": [[f.node, f.behavior.value, f.at_cycle, f.coalition_id] for f in cfg.faults],
        "churn": [[c.cycle, c.node, c.action] for c in cfg.churn],
        "coalition": list(cfg.coalition),
    }


def scenario_from_record(d: dict) -> ScenarioConfig:
    from .chain import partition_from_record

    return ScenarioConfig(
        node_count=d["node_count"],
        strand_count=d["strand_count"],
        cycles_per_epoch=d["cycles_per_epoch"],
        reshuffle_duration=d["reshuffle_duration"],
        join_threshold=d["join_threshold"],
        cycle_ticks=d["cycle_ticks"],
        horizon=d["horizon"],
        seed=d["seed"],
        latency=LatencyModel(*d["latency"]),
        workload=Workload(*d["workload"]),
        partition=partition_from_record(d["partition"]),
        shuffle=ShuffleMode(d["shuffle"]),
        shuffle_every=d["shuffle_every"],
        faults=tuple(FaultSpec(n, Behavior(b), c, k) for n, b, c, k in d["faults"]),
        churn=tuple(ChurnEvent(c, n, a) for c, n, a in d["churn"]),
        coalition=tuple(d["coalition"]),
    )
