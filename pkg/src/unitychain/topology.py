"""Strand configurations, VRF-driven reordering, key-range routing and the
majority/carryover arithmetic shared by every other module."""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from itertools import combinations
from typing import Iterable, Mapping, Sequence

KEY_SPACE = 2**64
MIN_CONFIGURATION = 4


class Strand(str, Enum):
    POSITIVE = "+"
    NEGATIVE = "-"

    @property
    def counterpart(self) -> Strand:
        return Strand.NEGATIVE if self is Strand.POSITIVE else Strand.POSITIVE

    def __str__(self) -> str:
        return self.value


STRANDS = (Strand.POSITIVE, Strand.NEGATIVE)


@lru_cache(maxsize=None)
def node_key(name: str) -> bytes:
    """32-byte public identifier of a node; also its canonical sort key."""
    return hashlib.sha256(b"unitychain/node/" + name.encode()).digest()


def sort_nodes(names: Iterable[str]) -> list[str]:
    return sorted(names, key=node_key)


@dataclass(frozen=True)
class GroupKeyRef:
    ritual_id: str
    public_key: int
    threshold: int


class PartitionMode(str, Enum):
    PARITY = "parity"
    RANGES = "ranges"
    FULL = "full"


@dataclass(frozen=True)
class KeyPredicate:
    """Keys one strand answers for: a parity class, a set of half-open
    ranges, or everything."""

    parity: int | None = None
    ranges: tuple[tuple[int, int], ...] = ()
    everything: bool = False

    def matches(self, key: int) -> bool:
        if self.everything:
            return True
        if self.parity is not None:
            return key % 2 == self.parity
        return any(lo <= key < hi for lo, hi in self.ranges)

    def describe(self) -> str:
        if self.everything:
            return "all"
        if self.parity is not None:
            return "even" if self.parity == 0 else "odd"
        return ",".join(f"{lo:x}-{hi:x}" for lo, hi in self.ranges)


@dataclass(frozen=True)
class KeyRangePartition:
    mode: PartitionMode
    assignments: tuple[tuple[Strand, KeyPredicate], ...]

    @classmethod
    def parity(cls, even: Strand = Strand.POSITIVE) -> KeyRangePartition:
        return cls(
            PartitionMode.PARITY,
            ((even, KeyPredicate(parity=0)), (even.counterpart, KeyPredicate(parity=1))),
        )

    @classmethod
    def full(cls, strand: Strand) -> KeyRangePartition:
        return cls(PartitionMode.FULL, ((strand, KeyPredicate(everything=True)),))

    @classmethod
    def ranges(cls, spans: Iterable[tuple[int, int, Strand]]) -> KeyRangePartition:
        """Build from half-open (lo, hi, strand) spans."""
        by_strand: dict[Strand, list[tuple[int, int]]] = {}
        for lo, hi, strand in spans:
            by_strand.setdefault(Strand(strand), []).append((lo, hi))
        return cls(
            PartitionMode.RANGES,
            tuple((s, KeyPredicate(ranges=tuple(sorted(r)))) for s, r in sorted(by_strand.items())),
        )

    def predicate(self, strand: Strand) -> KeyPredicate | None:
        for s, p in self.assignments:
            if s == strand:
                return p
        return None

    @property
    def strands(self) -> tuple[Strand, ...]:
        return tuple(s for s, _ in self.assignments)

    def describe(self) -> str:
        if self.mode is PartitionMode.FULL:
            return f"full:{self.assignments[0][0].value}"
        return ";".join(f"{s.value}={p.describe()}" for s, p in self.assignments)


def claimants(key: int, partition: KeyRangePartition) -> list[Strand]:
    return [s for s, p in partition.assignments if p.matches(key)]


def route_key(key: int, partition: KeyRangePartition) -> Strand:
    for strand, predicate in partition.assignments:
        if predicate.matches(key):
            return strand
    raise ValueError(f"key {key} is not covered by partition {partition.describe()}")


def check_partition(partition: KeyRangePartition) -> str | None:
    """None if the partition is total and disjoint, else 'partition-overlap'
    or 'partition-gap'."""
    strands = partition.strands
    if len(set(strands)) != len(strands):
        return "partition-overlap"
    preds = [p for _, p in partition.assignments]
    mode = partition.mode
    if mode is PartitionMode.FULL:
        if len(preds) != 1:
            return "partition-overlap" if len(preds) > 1 else "partition-gap"
        return None if preds[0].everything else "partition-gap"
    if any(p.everything for p in preds):
        return "partition-overlap"
    if mode is PartitionMode.PARITY:
        if any(p.parity is None or p.ranges for p in preds):
            return "partition-gap"
        residues = [p.parity for p in preds]
        if len(set(residues)) != len(residues):
            return "partition-overlap"
        return None if set(residues) == {0, 1} else "partition-gap"
    spans = sorted(span for p in preds if p.parity is None for span in p.ranges)
    if any(p.parity is not None for p in preds):
        return "partition-overlap"
    cursor = 0
    for lo, hi in spans:
        if lo >= hi:
            return "partition-gap"
        if lo < cursor:
            return "partition-overlap"
        if lo > cursor:
            return "partition-gap"
        cursor = hi
    return None if cursor >= KEY_SPACE else "partition-gap"


@dataclass(frozen=True)
class NetworkConfiguration:
    """Ordered membership of one strand. Slot order is leader order; the
    configuration becomes active at cycle `active_from`."""

    strand: Strand
    members: tuple[str, ...]
    group_key: GroupKeyRef
    responsibility: KeyPredicate
    active_from: int = 0

    @property
    def threshold(self) -> int:
        return majority_threshold(len(self.members))

    def slot_of(self, name: str) -> int:
        return self.members.index(name)

    def activated(self, cycle: int) -> NetworkConfiguration:
        return replace(self, active_from=cycle)


def majority_threshold(n: int) -> int:
    """ceil(0.51 * n), the signing and carryover quorum."""
    if n < 1:
        raise ValueError("majority threshold of an empty configuration")
    return (51 * n + 99) // 100


def shuffle_members(members: Sequence[str], seed: bytes) -> tuple[str, ...]:
    """Fisher-Yates over `members`, driven by a PRNG seeded from `seed`."""
    return _shuffle(tuple(members), seed)


@lru_cache(maxsize=1024)
def _shuffle(members: tuple[str, ...], seed: bytes) -> tuple[str, ...]:
    # every replica derives the same permutation from the same block
    out = list(members)
    random.Random(int.from_bytes(seed, "big")).shuffle(out)
    return tuple(out)


def permute_configuration(
    config: NetworkConfiguration, seed: bytes, active_from: int | None = None
) -> NetworkConfiguration:
    return replace(
        config,
        members=shuffle_members(config.members, seed),
        active_from=config.active_from if active_from is None else active_from,
    )


def carryover_check(prior_members: Iterable[str], next_members: Iterable[str]) -> bool:
    prior = set(prior_members)
    if not prior:
        raise ValueError("carryover check against an empty prior membership")
    return len(prior & set(next_members)) >= majority_threshold(len(prior))


def select_leader(config: NetworkConfiguration, cycle: int) -> str:
    """Slot 0 leads the configuration's first cycle; each cycle without a new
    block passes leadership one slot down."""
    if not config.members:
        raise ValueError("empty configuration has no leader")
    return config.members[(cycle - config.active_from) % len(config.members)]


def leadership_conflict_check(configs: Mapping[Strand, NetworkConfiguration], cycle: int) -> bool:
    leaders = [select_leader(c, cycle) for c in configs.values()]
    return len(set(leaders)) == len(leaders)


def effective_leaders(configs: Mapping[Strand, NetworkConfiguration], cycle: int) -> dict[Strand, str]:
    """Per-strand leaders after the conflict fix-up: a strand whose leader is
    already leading an earlier strand (POSITIVE first) steps down its own
    order until it finds a free node."""
    taken: set[str] = set()
    out: dict[Strand, str] = {}
    for strand in sorted(configs):
        config = configs[strand]
        n = len(config.members)
        base = (cycle - config.active_from) % n
        leader = config.members[base]
        for step in range(1, n):
            if leader not in taken:
                break
            leader = config.members[(base + step) % n]
        taken.add(leader)
        out[strand] = leader
    return out


def kendall_distance(a: Sequence[str], b: Sequence[str]) -> float:
    """Normalised Kendall-tau distance over the members common to both orders."""
    common = set(a) & set(b)
    pos_b = {x: i for i, x in enumerate(x for x in b if x in common)}
    seq = [pos_b[x] for x in a if x in common]
    m = len(seq)
    if m < 2:
        return 0.0
    discordant = sum(1 for i, j in combinations(range(m), 2) if seq[i] > seq[j])
    return discordant / (m * (m - 1) / 2)


@dataclass(frozen=True)
class MembershipPlan:
    members: tuple[str, ...]
    joined: tuple[str, ...]
    left: tuple[str, ...]
    deferred_joins: tuple[str, ...]
    deferred_leaves: tuple[str, ...]


def plan_membership(
    prior: Sequence[str],
    join_requests: Iterable[str],
    leave_notices: Iterable[str],
    join_threshold: int,
) -> MembershipPlan:
    """Apply churn for one reshuffle.

    Leaves are honoured in node-key order while the carryover rule and the
    minimum configuration size hold; joiners are admitted in node-key order
    up to `join_threshold` while carried-over nodes stay a signing majority.
    Everything else is deferred.
    """
    prior_set = set(prior)
    leaves = sort_nodes(set(leave_notices) & prior_set)
    joins = sort_nodes(set(join_requests) - prior_set)
    keep_at_least = majority_threshold(len(prior))
    max_leaves = max(0, len(prior) - keep_at_least)
    left = leaves[:max_leaves]
    retained = len(prior) - len(left)
    joined: list[str] = []
    for name in joins:
        if len(joined) >= join_threshold:
            break
        if retained < majority_threshold(retained + len(joined) + 1):
            break
        joined.append(name)
    while retained + len(joined) < MIN_CONFIGURATION and left:
        left.pop()
        retained += 1
    left_set = set(left)
    members = [m for m in prior if m not in left_set] + joined
    return MembershipPlan(
        members=tuple(members),
        joined=tuple(joined),
        left=tuple(left),
        deferred_joins=tuple(j for j in joins if j not in joined),
        deferred_leaves=tuple(x for x in leaves if x not in left_set),
    )
