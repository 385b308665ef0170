"""Block kinds, canonical hashing and the acceptance rules for each kind."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, is_dataclass
from enum import Enum
from functools import cached_property
from typing import Any, Mapping, Union

from .crypto import DEFAULT_PARAMS, AggregateSignature, GroupParams, combine_seeds, derive_vrf_seed, verify_aggregate
from .topology import (
    MIN_CONFIGURATION,
    STRANDS,
    GroupKeyRef,
    KeyPredicate,
    KeyRangePartition,
    NetworkConfiguration,
    PartitionMode,
    Strand,
    carryover_check,
    check_partition,
    majority_threshold,
    permute_configuration,
)

# Fields derived from, or equal to, signatures are not covered by the block hash.
UNSIGNED = {"unsigned": True}


class ShuffleMode(str, Enum):
    CYCLE = "cycle"
    EPOCH = "epoch"
    NEVER = "never"


@dataclass(frozen=True)
class ProtocolParams:
    cycles_per_epoch: int = 10
    reshuffle_duration: int = 3
    join_threshold: int = 2
    strand_count: int = 2
    cycle_ticks: int = 100
    shuffle: ShuffleMode = ShuffleMode.CYCLE
    shuffle_every: int = 1

    @property
    def permutes_each_cycle(self) -> bool:
        return self.shuffle is ShuffleMode.CYCLE

    def reshuffles_topology(self, epoch: int) -> bool:
        if self.shuffle is ShuffleMode.NEVER:
            return False
        if self.shuffle is ShuffleMode.EPOCH:
            return epoch % self.shuffle_every == 0
        return True


class _Hashed:
    @cached_property
    def hash(self) -> bytes:
        return hash_block(self)


@dataclass(frozen=True)
class OriginBlock(_Hashed):
    members: tuple[str, ...]
    params: ProtocolParams
    configuration: NetworkConfiguration
    bootstrap_signature: AggregateSignature | None = field(default=None, metadata=UNSIGNED)

    height = 0


@dataclass(frozen=True)
class CycleBlock(_Hashed):
    strand: Strand
    height: int
    cycle: int
    parent_hash: bytes
    proposer: str
    tx_summary: tuple[bytes, ...]
    # topology for the next cycle; a function of the signature, hence unsigned
    configuration: NetworkConfiguration | None = field(default=None, metadata=UNSIGNED)
    signature: AggregateSignature | None = field(default=None, metadata=UNSIGNED)
    handoff_signature: AggregateSignature | None = field(default=None, metadata=UNSIGNED)


@dataclass(frozen=True)
class EpochBlock(_Hashed):
    epoch: int
    cycle: int
    proposer: str
    ascending: Strand
    descending: Strand
    responsibilities: KeyRangePartition
    parent_hashes: tuple[tuple[Strand, bytes], ...]
    prior_nexus: bytes
    join_requests: tuple[str, ...] = ()
    leave_notices: tuple[str, ...] = ()
    ascending_signature: AggregateSignature | None = field(default=None, metadata=UNSIGNED)
    descending_signature: AggregateSignature | None = field(default=None, metadata=UNSIGNED)

    def tip_hash(self, strand: Strand) -> bytes | None:
        return dict(self.parent_hashes).get(strand)


@dataclass(frozen=True)
class EpochGenesisBlock(_Hashed):
    epoch: int
    cycle: int
    proposer: str
    parent: bytes
    dominant: Strand | None
    submissive: Strand | None
    new_configurations: tuple[NetworkConfiguration, ...]
    partition: KeyRangePartition
    submissive_signature: AggregateSignature | None = field(default=None, metadata=UNSIGNED)
    dominant_signature: AggregateSignature | None = field(default=None, metadata=UNSIGNED)

    def configuration(self, strand: Strand) -> NetworkConfiguration | None:
        for c in self.new_configurations:
            if c.strand == strand:
                return c
        return None

    @property
    def members(self) -> frozenset[str]:
        return frozenset(m for c in self.new_configurations for m in c.members)


Block = Union[OriginBlock, CycleBlock, EpochBlock, EpochGenesisBlock]


# --- canonical encoding -----------------------------------------------------


def _enc(value: Any, out: bytearray) -> None:
    if value is None:
        out += b"N"
    elif isinstance(value, bool):
        out += b"T" if value else b"F"
    elif isinstance(value, Enum):
        _enc(value.value, out)
    elif isinstance(value, int):
        if value < 0:
            raw = (-value).to_bytes((-value).bit_length() // 8 + 1, "big")
            out += b"i" + len(raw).to_bytes(1, "big") + raw
        else:
            raw = value.to_bytes(value.bit_length() // 8 + 1, "big")
            out += b"I" + len(raw).to_bytes(1, "big") + raw
    elif isinstance(value, str):
        raw = value.encode()
        out += b"S" + len(raw).to_bytes(4, "big") + raw
    elif isinstance(value, bytes):
        out += b"B" + len(value).to_bytes(4, "big") + value
    elif isinstance(value, (tuple, list)):
        out += b"L" + len(value).to_bytes(4, "big")
        for item in value:
            _enc(item, out)
    elif isinstance(value, frozenset):
        _enc(sorted(value), out)
    elif is_dataclass(value):
        name = type(value).__name__.encode()
        signed = [f for f in fields(value) if not f.metadata.get("unsigned")]
        out += b"D" + len(name).to_bytes(1, "big") + name + len(signed).to_bytes(1, "big")
        for f in signed:
            _enc(getattr(value, f.name), out)
    else:
        raise TypeError(f"cannot encode {type(value).__name__}")


def encode_canonical(value: Any) -> bytes:
    out = bytearray()
    _enc(value, out)
    return bytes(out)


def hash_block(block: Block) -> bytes:
    return hashlib.sha256(b"unitychain/block/v1/" + encode_canonical(block)).digest()


# --- validation -------------------------------------------------------------


class Reason(str, Enum):
    BAD_PARENT = "bad-parent"
    BAD_HEIGHT = "bad-height"
    BAD_SIGNATURE = "bad-signature"
    SUB_MAJORITY = "sub-majority"
    TOPOLOGY_MISMATCH = "topology-mismatch"
    WRONG_ALTERNATION = "wrong-alternation"
    STALE_TIPS = "stale-tips"
    BAD_ASCENDING_SIGNATURE = "bad-ascending-signature"
    BAD_DESCENDING_SIGNATURE = "bad-descending-signature"
    INCOMPLETE_RESPONSIBILITY = "incomplete-responsibility"
    BAD_CONFIGURATION = "bad-configuration"
    BAD_SUBMISSIVE_SIGNATURE = "bad-submissive-signature"
    BAD_DOMINANT_SIGNATURE = "bad-dominant-signature"
    PARTITION_GAP = "partition-gap"
    PARTITION_OVERLAP = "partition-overlap"
    CARRYOVER_VIOLATION = "carryover-violation"


@dataclass(frozen=True)
class Verdict:
    reason: Reason | None = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.reason is None


ACCEPT = Verdict()


@dataclass(frozen=True)
class Tip:
    """Head of a strand as seen by a validator.

    `configuration` signs the next block. After an epoch genesis the
    submissive strand's tip carries its fresh configuration, while the
    dominant strand keeps its old one and lists the fresh one as `handoff`.
    """

    hash: bytes
    height: int
    configuration: NetworkConfiguration
    handoff: NetworkConfiguration | None = None

    @classmethod
    def of(cls, block: CycleBlock) -> Tip:
        assert block.configuration is not None
        return cls(block.hash, block.height, block.configuration)


def signature_problem(
    sig: AggregateSignature | None,
    config: NetworkConfiguration,
    message: bytes,
    params: GroupParams = DEFAULT_PARAMS,
) -> Reason | None:
    if sig is None:
        return Reason.BAD_SIGNATURE
    if len(sig.signer_set) < config.threshold:
        return Reason.SUB_MAJORITY
    if not sig.signer_set <= set(config.members):
        return Reason.BAD_SIGNATURE
    if not verify_aggregate(sig, config.group_key.public_key, message, params):
        return Reason.BAD_SIGNATURE
    return None


def cycle_seed(block: CycleBlock, params: GroupParams = DEFAULT_PARAMS) -> bytes:
    assert block.signature is not None
    seed = derive_vrf_seed(block.signature, params)
    if block.handoff_signature is not None:
        seed = combine_seeds(seed, derive_vrf_seed(block.handoff_signature, params))
    return seed


def next_configuration(
    basis: NetworkConfiguration, block: CycleBlock, permute: bool, params: GroupParams = DEFAULT_PARAMS
) -> NetworkConfiguration:
    if permute:
        return permute_configuration(basis, cycle_seed(block, params), active_from=block.cycle + 1)
    return basis.activated(block.cycle + 1)


def validate_cycle_block(
    block: CycleBlock,
    parent: Tip | CycleBlock,
    params: GroupParams = DEFAULT_PARAMS,
    permute: bool = True,
) -> Verdict:
    tip = Tip.of(parent) if isinstance(parent, CycleBlock) else parent
    if block.strand != tip.configuration.strand or block.parent_hash != tip.hash:
        return Verdict(Reason.BAD_PARENT)
    if block.height != tip.height + 1:
        return Verdict(Reason.BAD_HEIGHT, f"{block.height} after {tip.height}")
    message = block.hash
    problem = signature_problem(block.signature, tip.configuration, message, params)
    if problem:
        return Verdict(problem)
    basis = tip.configuration
    if tip.handoff is not None:
        problem = signature_problem(block.handoff_signature, tip.handoff, message, params)
        if problem:
            return Verdict(problem, "handoff")
        basis = tip.handoff
    elif block.handoff_signature is not None:
        return Verdict(Reason.BAD_SIGNATURE, "unexpected handoff signature")
    if block.configuration != next_configuration(basis, block, permute, params):
        return Verdict(Reason.TOPOLOGY_MISMATCH)
    return ACCEPT


def expected_ascending(prior_epoch: EpochBlock | None) -> Strand:
    # odd epochs are led by the negative strand, starting with epoch 1
    return Strand.NEGATIVE if prior_epoch is None else prior_epoch.ascending.counterpart


def validate_epoch_block(
    block: EpochBlock,
    tips: Mapping[Strand, Tip],
    prior_epoch: EpochBlock | None,
    params: GroupParams = DEFAULT_PARAMS,
) -> Verdict:
    if block.ascending != expected_ascending(prior_epoch) or block.descending != block.ascending.counterpart:
        return Verdict(Reason.WRONG_ALTERNATION)
    if dict(block.parent_hashes) != {s: t.hash for s, t in tips.items()}:
        return Verdict(Reason.STALE_TIPS)
    message = block.hash
    if signature_problem(block.ascending_signature, tips[block.ascending].configuration, message, params):
        return Verdict(Reason.BAD_ASCENDING_SIGNATURE)
    if signature_problem(block.descending_signature, tips[block.descending].configuration, message, params):
        return Verdict(Reason.BAD_DESCENDING_SIGNATURE)
    r = block.responsibilities
    if r.mode is not PartitionMode.FULL or r.strands != (block.ascending,) or check_partition(r):
        return Verdict(Reason.INCOMPLETE_RESPONSIBILITY)
    return ACCEPT


def validate_epoch_genesis(
    block: EpochGenesisBlock,
    parent: EpochBlock | OriginBlock,
    dominant: NetworkConfiguration,
    prior_members: frozenset[str] | set[str] | tuple[str, ...],
    params: GroupParams = DEFAULT_PARAMS,
    check_dominant: bool = True,
) -> Verdict:
    """`dominant` is the configuration that signed the dominant strand's tip;
    `prior_members` is the membership the epoch started with. Countersigners
    pass check_dominant=False to vet a block before adding their signature."""
    bootstrap = isinstance(parent, OriginBlock)
    if block.parent != parent.hash:
        return Verdict(Reason.BAD_PARENT)
    if not bootstrap and (
        block.epoch != parent.epoch or block.dominant != parent.ascending or block.submissive != parent.descending
    ):
        return Verdict(Reason.BAD_PARENT, "epoch/strand roles differ from parent")
    configs = block.new_configurations
    if tuple(c.strand for c in configs) != STRANDS:
        return Verdict(Reason.BAD_CONFIGURATION, "need one configuration per strand")
    member_sets = {frozenset(c.members) for c in configs}
    if len(member_sets) != 1:
        return Verdict(Reason.BAD_CONFIGURATION, "strands disagree on membership")
    for c in configs:
        if len(c.members) < MIN_CONFIGURATION or len(set(c.members)) != len(c.members):
            return Verdict(Reason.BAD_CONFIGURATION, f"strand {c.strand.value} has {len(c.members)} members")
        if c.group_key.threshold != c.threshold:
            return Verdict(Reason.BAD_CONFIGURATION, "threshold is not the majority threshold")
    message = block.hash
    submissive_cfg = dominant if bootstrap else block.configuration(block.submissive)
    if signature_problem(block.submissive_signature, submissive_cfg, message, params):
        return Verdict(Reason.BAD_SUBMISSIVE_SIGNATURE)
    if check_dominant and signature_problem(block.dominant_signature, dominant, message, params):
        return Verdict(Reason.BAD_DOMINANT_SIGNATURE)
    if block.partition.mode is PartitionMode.FULL:
        return Verdict(Reason.PARTITION_GAP, "diverged strands need a split partition")
    problem = check_partition(block.partition)
    if problem:
        return Verdict(Reason(problem))
    if set(block.partition.strands) != set(STRANDS):
        return Verdict(Reason.PARTITION_GAP)
    if not carryover_check(prior_members, block.members):
        return Verdict(Reason.CARRYOVER_VIOLATION)
    return ACCEPT


def build_origin_block(
    members: list[str] | tuple[str, ...],
    params: ProtocolParams = ProtocolParams(),
    group_key: GroupKeyRef | None = None,
) -> OriginBlock:
    """Height-0 block: every member in one configuration over the whole keyspace.

    `group_key` is the origin ritual's key; without one the configuration is
    unkeyed and the block cannot be bootstrap-signed.
    """
    members = tuple(members)
    if len(members) < MIN_CONFIGURATION:
        raise ValueError(f"origin needs at least {MIN_CONFIGURATION} members, got {len(members)}")
    if len(set(members)) != len(members):
        raise ValueError("duplicate origin members")
    if group_key is None:
        group_key = GroupKeyRef("origin", 0, majority_threshold(len(members)))
    config = NetworkConfiguration(None, members, group_key, KeyPredicate(everything=True), 0)  # type: ignore[arg-type]
    return OriginBlock(members, params, config)


# --- JSON records (event log) ----------------------------------------------


def _hex(b: bytes | None) -> str | None:
    return None if b is None else b.hex()


def sig_record(sig: AggregateSignature | None) -> dict | None:
    if sig is None:
        return None
    return {"value": sig.value, "digest": sig.message_digest.hex(), "signers": sorted(sig.signer_set)}


def sig_from_record(d: dict | None) -> AggregateSignature | None:
    if d is None:
        return None
    return AggregateSignature(d["value"], bytes.fromhex(d["digest"]), frozenset(d["signers"]))


def predicate_record(p: KeyPredicate) -> dict:
    return {"parity": p.parity, "ranges": [list(r) for r in p.ranges], "all": p.everything}


def predicate_from_record(d: dict) -> KeyPredicate:
    return KeyPredicate(d["parity"], tuple((lo, hi) for lo, hi in d["ranges"]), d["all"])


def partition_record(p: KeyRangePartition) -> dict:
    return {"mode": p.mode.value, "assignments": [[s.value, predicate_record(q)] for s, q in p.assignments]}


def partition_from_record(d: dict) -> KeyRangePartition:
    return KeyRangePartition(
        PartitionMode(d["mode"]),
        tuple((Strand(s), predicate_from_record(q)) for s, q in d["assignments"]),
    )


def config_record(c: NetworkConfiguration | None) -> dict | None:
    if c is None:
        return None
    return {
        "strand": None if c.strand is None else c.strand.value,
        "members": list(c.members),
        "ritual": c.group_key.ritual_id,
        "gpk": c.group_key.public_key,
        "t": c.group_key.threshold,
        "responsibility": predicate_record(c.responsibility),
        "active_from": c.active_from,
    }


def config_from_record(d: dict | None) -> NetworkConfiguration | None:
    if d is None:
        return None
    return NetworkConfiguration(
        None if d["strand"] is None else Strand(d["strand"]),
        tuple(d["members"]),
        GroupKeyRef(d["ritual"], d["gpk"], d["t"]),
        predicate_from_record(d["responsibility"]),
        d["active_from"],
    )


def params_record(p: ProtocolParams) -> dict:
    return {
        "cycles_per_epoch": p.cycles_per_epoch,
        "reshuffle_duration": p.reshuffle_duration,
        "join_threshold": p.join_threshold,
        "strand_count": p.strand_count,
        "cycle_ticks": p.cycle_ticks,
        "shuffle": p.shuffle.value,
        "shuffle_every": p.shuffle_every,
    }


def params_from_record(d: dict) -> ProtocolParams:
    return ProtocolParams(**{**d, "shuffle": ShuffleMode(d["shuffle"])})


def block_record(block: Block) -> dict:
    if isinstance(block, CycleBlock):
        return {
            "kind": "cycle",
            "strand": block.strand.value,
            "height": block.height,
            "cycle": block.cycle,
            "parent_hash": block.parent_hash.hex(),
            "proposer": block.proposer,
            "tx_summary": [t.hex() for t in block.tx_summary],
            "configuration": config_record(block.configuration),
            "signature": sig_record(block.signature),
            "handoff_signature": sig_record(block.handoff_signature),
        }
    if isinstance(block, EpochBlock):
        return {
            "kind": "epoch",
            "epoch": block.epoch,
            "cycle": block.cycle,
            "proposer": block.proposer,
            "ascending": block.ascending.value,
            "descending": block.descending.value,
            "responsibilities": partition_record(block.responsibilities),
            "parent_hashes": [[s.value, h.hex()] for s, h in block.parent_hashes],
            "prior_nexus": block.prior_nexus.hex(),
            "join_requests": list(block.join_requests),
            "leave_notices": list(block.leave_notices),
            "ascending_signature": sig_record(block.ascending_signature),
            "descending_signature": sig_record(block.descending_signature),
        }
    if isinstance(block, EpochGenesisBlock):
        return {
            "kind": "genesis",
            "epoch": block.epoch,
            "cycle": block.cycle,
            "proposer": block.proposer,
            "parent": block.parent.hex(),
            "dominant": _strand_value(block.dominant),
            "submissive": _strand_value(block.submissive),
            "new_configurations": [config_record(c) for c in block.new_configurations],
            "partition": partition_record(block.partition),
            "submissive_signature": sig_record(block.submissive_signature),
            "dominant_signature": sig_record(block.dominant_signature),
        }
    if isinstance(block, OriginBlock):
        return {
            "kind": "origin",
            "members": list(block.members),
            "params": params_record(block.params),
            "configuration": config_record(block.configuration),
            "bootstrap_signature": sig_record(block.bootstrap_signature),
        }
    raise TypeError(type(block).__name__)


def _strand_value(s: Strand | None) -> str | None:
    return None if s is None else s.value


def _strand(v: str | None) -> Strand | None:
    return None if v is None else Strand(v)


def block_from_record(d: dict) -> Block:
    kind = d["kind"]
    if kind == "cycle":
        return CycleBlock(
            Strand(d["strand"]),
            d["height"],
            d["cycle"],
            bytes.fromhex(d["parent_hash"]),
            d["proposer"],
            tuple(bytes.fromhex(t) for t in d["tx_summary"]),
            config_from_record(d["configuration"]),
            sig_from_record(d["signature"]),
            sig_from_record(d["handoff_signature"]),
        )
    if kind == "epoch":
        return EpochBlock(
            d["epoch"],
            d["cycle"],
            d["proposer"],
            Strand(d["ascending"]),
            Strand(d["descending"]),
            partition_from_record(d["responsibilities"]),
            tuple((Strand(s), bytes.fromhex(h)) for s, h in d["parent_hashes"]),
            bytes.fromhex(d["prior_nexus"]),
            tuple(d["join_requests"]),
            tuple(d["leave_notices"]),
            sig_from_record(d["ascending_signature"]),
            sig_from_record(d["descending_signature"]),
        )
    if kind == "genesis":
        return EpochGenesisBlock(
            d["epoch"],
            d["cycle"],
            d["proposer"],
            bytes.fromhex(d["parent"]),
            _strand(d["dominant"]),
            _strand(d["submissive"]),
            tuple(config_from_record(c) for c in d["new_configurations"]),
            partition_from_record(d["partition"]),
            sig_from_record(d["submissive_signature"]),
            sig_from_record(d["dominant_signature"]),
        )
    if kind == "origin":
        return OriginBlock(
            tuple(d["members"]),
            params_from_record(d["params"]),
            config_from_record(d["configuration"]),
            sig_from_record(d["bootstrap_signature"]),
        )
    raise ValueError(f"unknown block kind {kind!r}")
