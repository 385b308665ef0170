"""Per-node protocol state machine.

Each NodeEngine is a deterministic reactor: the simulator feeds it timer
ticks and messages, and it answers with outgoing messages. Within a cycle of
T ticks the schedule is:

    0       cycle tick: leaders propose cycle blocks, DKG rounds start
    T/4     complaint deadline for missing DKG dealings
    T/2     DKG rounds close; epoch and genesis proposals
    T-1     (simulator) end-of-cycle snapshot

Collectors (the proposing leader) gather signature shares, aggregate them
and broadcast the finished block as a BlockAnnouncement.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable

from .chain import (
    Block,
    CycleBlock,
    EpochBlock,
    EpochGenesisBlock,
    OriginBlock,
    ProtocolParams,
    Reason,
    Tip,
    Verdict,
    expected_ascending,
    next_configuration,
    signature_problem,
    validate_cycle_block,
    validate_epoch_block,
    validate_epoch_genesis,
)
from .crypto import (
    DEFAULT_PARAMS,
    AggregateSignature,
    DealingCommitment,
    GroupKeyMaterial,
    GroupParams,
    SecretShare,
    SignatureShare,
    aggregate,
    combine_seeds,
    committed_value,
    deal,
    derive_vrf_seed,
    sign_with_share,
    verify_share,
    verify_signature_share,
)
from .scenario import Transaction
from .topology import (
    STRANDS,
    GroupKeyRef,
    KeyRangePartition,
    MembershipPlan,
    NetworkConfiguration,
    Strand,
    effective_leaders,
    majority_threshold,
    plan_membership,
    route_key,
    shuffle_members,
    sort_nodes,
)


class StrandPhase(str, Enum):
    DIVERGED = "Diverged"
    EPOCH_CONVERGING = "EpochConverging"
    RESHUFFLING = "Reshuffling"
    DOMINANT_FULL = "DominantFullKeyspace"
    GENESIS_PENDING = "GenesisPending"


# EpochConverging -> Diverged is the abort edge for an epoch proposal that
# never gathered both majorities within its cycle.
LEGAL_TRANSITIONS: dict[StrandPhase, frozenset[StrandPhase]] = {
    StrandPhase.DIVERGED: frozenset({StrandPhase.EPOCH_CONVERGING}),
    StrandPhase.EPOCH_CONVERGING: frozenset(
        {StrandPhase.RESHUFFLING, StrandPhase.DOMINANT_FULL, StrandPhase.DIVERGED}
    ),
    StrandPhase.RESHUFFLING: frozenset({StrandPhase.GENESIS_PENDING}),
    StrandPhase.DOMINANT_FULL: frozenset({StrandPhase.GENESIS_PENDING}),
    StrandPhase.GENESIS_PENDING: frozenset({StrandPhase.DIVERGED}),
}


def is_legal_history(history: Iterable[StrandPhase]) -> bool:
    seq = list(history)
    if seq and seq[0] is not StrandPhase.DIVERGED:
        return False
    return all(b in LEGAL_TRANSITIONS[a] for a, b in zip(seq, seq[1:]))


class Kind(str, Enum):
    CYCLE_PROPOSAL = "CycleProposal"
    CYCLE_SIGNATURE_SHARE = "CycleSignatureShare"
    EPOCH_PROPOSAL = "EpochProposal"
    EPOCH_SIGNATURE_SHARE = "EpochSignatureShare"
    GENESIS_PROPOSAL = "GenesisProposal"
    GENESIS_SIGNATURE_SHARE = "GenesisSignatureShare"
    DKG_DEALING = "DkgDealing"
    DKG_COMPLAINT = "DkgComplaint"
    JOIN_REQUEST = "JoinRequest"
    LEAVE_NOTICE = "LeaveNotice"
    BLOCK_ANNOUNCEMENT = "BlockAnnouncement"


@dataclass(frozen=True)
class ProtocolMessage:
    kind: Kind
    sender: str
    strand: Strand | None
    height: int
    payload: Any = None


@dataclass(frozen=True)
class Outgoing:
    """A message and its recipients; `to=None` means every other node."""

    msg: ProtocolMessage
    to: tuple[str, ...] | None = None


@dataclass
class Ritual:
    """One node's view of a finished DKG ritual."""

    ritual_id: str
    participants: tuple[str, ...]
    threshold: int
    public_key: int
    share: SecretShare | None
    commitments: tuple[int, ...] = ()
    params: GroupParams = DEFAULT_PARAMS
    public_shares: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_material(cls, material: GroupKeyMaterial, holder: str) -> Ritual:
        return cls(
            material.ritual_id,
            tuple(material.member_shares),
            material.threshold,
            material.group_public_key,
            material.member_shares.get(holder),
            params=material.params,
            public_shares=dict(material.public_shares),
        )

    @property
    def key_ref(self) -> GroupKeyRef:
        return GroupKeyRef(self.ritual_id, self.public_key, self.threshold)

    def public_share(self, name: str) -> int | None:
        if name not in self.public_shares:
            if name not in self.participants or not self.commitments:
                return None
            index = self.participants.index(name) + 1
            self.public_shares[name] = committed_value(DealingCommitment("", self.commitments), index, self.params)
        return self.public_shares[name]


@dataclass
class DkgRound:
    ritual_id: str
    strand: Strand
    participants: tuple[str, ...]
    threshold: int
    dealings: dict[str, tuple[DealingCommitment, SecretShare]] = field(default_factory=dict)
    complaints: set[str] = field(default_factory=set)


@dataclass
class Reshuffle:
    epoch: EpochBlock
    plan: MembershipPlan
    prior_members: frozenset[str]
    start_cycle: int
    attempt: int = 0
    rounds: dict[Strand, DkgRound] = field(default_factory=dict)
    rituals: dict[Strand, Ritual] = field(default_factory=dict)

    @property
    def keys_ready(self) -> bool:
        return len(self.rituals) == len(STRANDS)


@dataclass
class _Collection:
    stage: str  # cycle | epoch1 | epoch2 | genesis1 | genesis2
    block: Any
    rituals: tuple[str, ...]
    slot: tuple
    shares: dict[str, dict[str, SignatureShare]] = field(default_factory=dict)
    done: bool = False


def ritual_name(epoch: int, strand: Strand, attempt: int) -> str:
    return f"e{epoch}{strand.value}a{attempt}"


class NodeEngine:
    def __init__(
        self,
        name: str,
        params: ProtocolParams,
        origin: OriginBlock,
        genesis: EpochGenesisBlock,
        rituals: Iterable[Ritual],
        seed: bytes,
        group: GroupParams = DEFAULT_PARAMS,
    ):
        self.name = name
        self.params = params
        self.group = group
        self.seed = seed
        self.origin = origin
        self.blocks: dict[bytes, Block] = {origin.hash: origin, genesis.hash: genesis}
        self.nexus: list[EpochBlock | EpochGenesisBlock] = [genesis]
        self.last_epoch: EpochBlock | None = None
        self.last_genesis = genesis
        self.genesis_cycle = -1
        self.tips: dict[Strand, Tip] = {
            s: Tip(genesis.hash, 0, genesis.configuration(s)) for s in STRANDS  # type: ignore[arg-type]
        }
        self.partition: KeyRangePartition = genesis.partition
        self.phase: dict[Strand, StrandPhase] = {s: StrandPhase.DIVERGED for s in STRANDS}
        self.phase_history: dict[Strand, list[StrandPhase]] = {s: [StrandPhase.DIVERGED] for s in STRANDS}
        self.rituals: dict[str, Ritual] = {r.ritual_id: r for r in rituals}
        self.reshuffle: Reshuffle | None = None
        self.epoch_pending: EpochBlock | None = None  # accepted epoch awaiting genesis
        self.pool: dict[bytes, Transaction] = {}
        self.finalized: set[bytes] = set()
        self.pending_joins: set[str] = set()
        self.pending_leaves: set[str] = set()
        self.cycle = 0
        self._cycle_leaders: dict[Strand, str] = {}
        self.equivocate = False
        self._signed: dict[tuple, bytes] = {}
        self._collections: dict[tuple[bytes, str], _Collection] = {}
        self._closed_slots: set[tuple] = set()
        self._buffer: list[ProtocolMessage] = []
        self.rejections: list[tuple[str, str, str]] = []  # (sender, what, reason)
        self.notes: list[tuple[str, dict]] = []  # drained by the simulator

    # --- views -----------------------------------------------------------

    @property
    def members(self) -> frozenset[str]:
        return frozenset(self.last_genesis.members)

    def producing(self) -> dict[Strand, NetworkConfiguration]:
        """Configurations allowed to propose cycle blocks right now."""
        out = {}
        for s in STRANDS:
            ph = self.phase[s]
            if ph in (StrandPhase.DIVERGED, StrandPhase.DOMINANT_FULL, StrandPhase.EPOCH_CONVERGING) or (
                ph is StrandPhase.GENESIS_PENDING and self.tips[s].handoff is not None
            ):
                out[s] = self.tips[s].configuration
        return out

    def leaders(self, cycle: int) -> dict[Strand, str]:
        return effective_leaders(self.producing(), cycle)

    def responsible(self, key: int) -> Strand:
        return route_key(key, self.partition)

    # --- bookkeeping -----------------------------------------------------

    def _note(self, event: str, **data: Any) -> None:
        self.notes.append((event, data))

    def _set_phase(self, strand: Strand, new: StrandPhase) -> None:
        old = self.phase[strand]
        if old is new:
            return
        self.phase[strand] = new
        self.phase_history[strand].append(new)
        self._note("phase", strand=strand.value, frm=old.value, to=new.value)

    def _reject(self, sender: str, what: str, reason: Reason | str, detail: str = "") -> None:
        reason = reason.value if isinstance(reason, Reason) else reason
        self.rejections.append((sender, what, reason))
        self._note("reject", sender=sender, what=what, reason=reason, detail=detail)

    def _rng(self, label: str) -> random.Random:
        digest = hashlib.sha256(self.seed + label.encode()).digest()
        return random.Random(int.from_bytes(digest, "big"))

    def _msg(self, kind: Kind, strand: Strand | None, height: int, payload: Any = None) -> ProtocolMessage:
        return ProtocolMessage(kind, self.name, strand, height, payload)

    def _sign(self, ritual: Ritual, message: bytes) -> tuple[str, SignatureShare]:
        assert ritual.share is not None
        return ritual.ritual_id, sign_with_share(ritual.share, message, self.group)

    # --- inputs from the simulator ---------------------------------------

    def submit(self, txs: Iterable[Transaction]) -> None:
        for tx in txs:
            if tx.digest not in self.finalized:
                self.pool.setdefault(tx.digest, tx)

    def request_join(self) -> list[Outgoing]:
        if self.name in self.members:
            return []
        self.pending_joins.add(self.name)
        return [Outgoing(self._msg(Kind.JOIN_REQUEST, None, self.cycle))]

    def notify_leave(self) -> list[Outgoing]:
        if self.name not in self.members:
            return []
        self.pending_leaves.add(self.name)
        return [Outgoing(self._msg(Kind.LEAVE_NOTICE, None, self.cycle))]

    def on_cycle_tick(self, cycle: int) -> list[Outgoing]:
        self.cycle = cycle
        out: list[Outgoing] = []
        for s in STRANDS:
            if self.phase[s] is StrandPhase.EPOCH_CONVERGING:
                self._set_phase(s, StrandPhase.DIVERGED)
        if self.reshuffle and not self.reshuffle.keys_ready and not self.reshuffle.rounds:
            if cycle >= self.reshuffle.start_cycle:
                out += self.run_reshuffle_subroutine()
        self._collections = {h: c for h, c in self._collections.items() if c.block.cycle >= cycle - 1}
        self._signed = {k: v for k, v in self._signed.items() if k[-1] >= cycle - 1}
        # leaders are fixed at the tick; blocks finalized later in the cycle
        # must not change who may propose in it
        self._cycle_leaders = self.leaders(cycle)
        for s, leader in sorted(self._cycle_leaders.items()):
            # a departing node cannot collect shares under keys it never received
            if leader == self.name and all(r.share is not None for r in self._rituals_for(self.tips[s])):
                out += self._propose_cycle(s, cycle)
        out += self._drain_buffer()
        return out

    def on_complaint_deadline(self, cycle: int) -> list[Outgoing]:
        out: list[Outgoing] = []
        if not self.reshuffle:
            return out
        for s in STRANDS:
            rnd = self.reshuffle.rounds.get(s)
            if rnd is None or self.name not in rnd.participants:
                continue
            for dealer in rnd.participants:
                if dealer not in rnd.dealings and dealer not in rnd.complaints:
                    out += self._complain(rnd, dealer, "missing dealing")
        return out

    def on_epoch_tick(self, cycle: int) -> list[Outgoing]:
        out: list[Outgoing] = []
        if self.reshuffle and self.reshuffle.rounds:
            self._close_dkg_rounds()
        if all(p is StrandPhase.DIVERGED for p in self.phase.values()):
            if cycle - self.genesis_cycle >= self.params.cycles_per_epoch:
                asc = expected_ascending(self.last_epoch)
                if self.leaders(cycle + 1).get(asc) == self.name:
                    out += self.propose_epoch_block(cycle)
        rs = self.reshuffle
        if rs and rs.keys_ready and cycle >= rs.start_cycle + self.params.reshuffle_duration - 1:
            expected = self.expected_genesis(cycle)
            if expected is not None and expected.proposer == self.name:
                out += self._open_genesis(expected)
        return out

    # --- cycle blocks ----------------------------------------------------

    def _routed_pending(self, strand: Strand) -> list[bytes]:
        return [d for d, tx in self.pool.items() if self.responsible(tx.key) == strand]

    def _propose_cycle(self, strand: Strand, cycle: int) -> list[Outgoing]:
        tip = self.tips[strand]
        txs = tuple(self._routed_pending(strand))
        block = CycleBlock(strand, tip.height + 1, cycle, tip.hash, self.name, txs)
        if self.equivocate and txs:
            return self._equivocate(block)
        self._open_collection("cycle", block, [r.ritual_id for r in self._rituals_for(tip)], (strand, block.height))
        msg = self._msg(Kind.CYCLE_PROPOSAL, strand, block.height, block)
        return [Outgoing(msg)] + self._on_cycle_proposal(msg)

    def _equivocate(self, block: CycleBlock) -> list[Outgoing]:
        other = replace(block, tx_summary=block.tx_summary[:-1])
        tip = self.tips[block.strand]
        rituals = [r.ritual_id for r in self._rituals_for(tip)]
        slot = (block.strand, block.height)
        self._open_collection("cycle", block, rituals, slot)
        self._open_collection("cycle", other, rituals, slot)
        signers = sort_nodes(set(tip.configuration.members) - {self.name})
        half = len(signers) // 2
        msg_a = self._msg(Kind.CYCLE_PROPOSAL, block.strand, block.height, block)
        msg_b = self._msg(Kind.CYCLE_PROPOSAL, block.strand, block.height, other)
        out = [Outgoing(msg_a, tuple(signers[:half])), Outgoing(msg_b, tuple(signers[half:]))]
        self._note("equivocation", strand=block.strand.value, height=block.height)
        return out + self._on_cycle_proposal(msg_a)

    def _rituals_for(self, tip: Tip) -> list[Ritual]:
        configs = [tip.configuration] + ([tip.handoff] if tip.handoff is not None else [])
        return [self._ritual_or_stub(c) for c in configs]

    def _ritual_or_stub(self, config: NetworkConfiguration) -> Ritual:
        ref = config.group_key
        r = self.rituals.get(ref.ritual_id)
        if r is None:
            # not a participant of that ritual; enough to name it in a collection
            r = Ritual(ref.ritual_id, config.members, ref.threshold, ref.public_key, None)
        return r

    def _on_cycle_proposal(self, msg: ProtocolMessage) -> list[Outgoing]:
        block: CycleBlock = msg.payload
        if not isinstance(block, CycleBlock):
            self._reject(msg.sender, "cycle-proposal", "ill-formed")
            return []
        s = block.strand
        tip = self.tips[s]
        if block.cycle > self.cycle or block.height > tip.height + 1:
            self._buffer.append(msg)
            return []
        if block.cycle < self.cycle or block.height <= tip.height:
            return []
        slot = (s, block.height, block.cycle)
        if slot in self._signed:
            return []
        problem = self._cycle_proposal_problem(block, msg.sender)
        if problem:
            self._reject(msg.sender, "cycle-proposal", problem)
            return []
        self._signed[slot] = block.hash
        shares = []
        for config in [tip.configuration] + ([tip.handoff] if tip.handoff else []):
            r = self.rituals.get(config.group_key.ritual_id)
            if r is not None and r.share is not None and self.name in config.members:
                shares.append(self._sign(r, block.hash))
        if not shares:
            return []
        reply = self._msg(Kind.CYCLE_SIGNATURE_SHARE, s, block.height, (block.hash, "cycle", tuple(shares)))
        if block.proposer == self.name:
            return self._on_share(reply)
        return [Outgoing(reply, (block.proposer,))]

    def _cycle_proposal_problem(self, block: CycleBlock, sender: str) -> str | None:
        s = block.strand
        if s not in self.producing():
            return "strand-not-producing"
        if block.proposer != sender or self._cycle_leaders.get(s) != sender:
            return "not-leader"
        if block.parent_hash != self.tips[s].hash:
            return Reason.BAD_PARENT.value
        if len(set(block.tx_summary)) != len(block.tx_summary):
            return "duplicate-tx"
        for d in block.tx_summary:
            tx = self.pool.get(d)
            if tx is None:
                return "unknown-tx"
            if self.responsible(tx.key) != s:
                return "misrouted-tx"
        return None

    def _open_collection(self, stage: str, block: Any, rituals: list[str], slot: tuple) -> None:
        if (block.hash, stage) not in self._collections:
            self._collections[block.hash, stage] = _Collection(stage, block, tuple(rituals), slot, {r: {} for r in rituals})

    def _on_share(self, msg: ProtocolMessage) -> list[Outgoing]:
        block_hash, stage, shares = msg.payload
        coll = self._collections.get((block_hash, stage))
        if coll is None or coll.done or coll.slot in self._closed_slots:
            return []
        for ritual_id, share in shares:
            if ritual_id not in coll.shares or share.signer != msg.sender:
                continue
            ritual = self.rituals.get(ritual_id)
            if ritual is None:
                continue
            pub = ritual.public_share(share.signer)
            if pub is None or share.index != ritual.participants.index(share.signer) + 1:
                self._reject(msg.sender, "signature-share", "unknown-signer")
                continue
            if share.signer in coll.shares[ritual_id]:
                continue
            if not verify_signature_share(share, pub, block_hash, self.group):
                self._reject(msg.sender, "signature-share", "bad-share")
                continue
            coll.shares[ritual_id][share.signer] = share
        if all(len(coll.shares[r]) >= self.rituals[r].threshold for r in coll.rituals if r in self.rituals) and all(
            r in self.rituals for r in coll.rituals
        ):
            return self._complete(coll)
        return []

    def _aggregate(self, coll: _Collection, ritual_id: str) -> AggregateSignature:
        ritual = self.rituals[ritual_id]
        shares = sorted(coll.shares[ritual_id].values(), key=lambda s: s.index)
        return aggregate(shares, ritual.threshold, self.group)

    def _complete(self, coll: _Collection) -> list[Outgoing]:
        coll.done = True
        if coll.stage == "cycle":
            self._closed_slots.add(coll.slot)
            return self.finalize_cycle_block(coll)
        if coll.stage == "epoch1":
            block = replace(coll.block, ascending_signature=self._aggregate(coll, coll.rituals[0]))
            return self._open_epoch_stage2(block)
        if coll.stage == "epoch2":
            block = replace(coll.block, descending_signature=self._aggregate(coll, coll.rituals[0]))
            return self._announce(block, self._accept_epoch_block(block, self.name))
        if coll.stage == "genesis1":
            block = replace(coll.block, submissive_signature=self._aggregate(coll, coll.rituals[0]))
            return self._open_genesis_stage2(block)
        if coll.stage == "genesis2":
            block = replace(coll.block, dominant_signature=self._aggregate(coll, coll.rituals[0]))
            return self._announce(block, self._accept_genesis(block, self.name))
        raise AssertionError(coll.stage)

    def finalize_cycle_block(self, coll: _Collection) -> list[Outgoing]:
        """Aggregate collected shares into the signed block and announce it."""
        block: CycleBlock = coll.block
        tip = self.tips[block.strand]
        sig = self._aggregate(coll, coll.rituals[0])
        handoff = self._aggregate(coll, coll.rituals[1]) if len(coll.rituals) > 1 else None
        block = replace(block, signature=sig, handoff_signature=handoff)
        basis = tip.handoff if tip.handoff is not None else tip.configuration
        block = replace(block, configuration=next_configuration(basis, block, self.params.permutes_each_cycle, self.group))
        return self._announce(block, self._accept_cycle_block(block, self.name))

    def _announce(self, block: Block, verdict: Verdict | None) -> list[Outgoing]:
        if verdict is None or not verdict:
            return []
        height = block.height if isinstance(block, CycleBlock) else block.epoch
        strand = block.strand if isinstance(block, CycleBlock) else None
        return [Outgoing(self._msg(Kind.BLOCK_ANNOUNCEMENT, strand, height, block))]

    def _accept_cycle_block(self, block: CycleBlock, sender: str) -> Verdict | None:
        """None when the block is stale or buffered, else the verdict."""
        s = block.strand
        tip = self.tips[s]
        if block.height <= tip.height:
            return None
        verdict = validate_cycle_block(block, tip, self.group, self.params.permutes_each_cycle)
        if not verdict:
            self._reject(sender, "cycle-block", verdict.reason, verdict.detail)  # type: ignore[arg-type]
            return verdict
        dup = [d for d in block.tx_summary if d in self.finalized]
        if dup:
            self._reject(sender, "cycle-block", "duplicate-tx")
            return Verdict(Reason.BAD_PARENT, "duplicate-tx")
        self.blocks[block.hash] = block
        self.tips[s] = Tip.of(block)
        for d in block.tx_summary:
            self.pool.pop(d, None)
            self.finalized.add(d)
        if self.phase[s] is StrandPhase.GENESIS_PENDING and tip.handoff is not None:
            self._set_phase(s, StrandPhase.DIVERGED)
        self._note("block", block=block)
        return verdict

    # --- epoch blocks ----------------------------------------------------

    def propose_epoch_block(self, cycle: int) -> list[Outgoing]:
        asc = expected_ascending(self.last_epoch)
        block = EpochBlock(
            epoch=(self.last_epoch.epoch if self.last_epoch else 0) + 1,
            cycle=cycle,
            proposer=self.name,
            ascending=asc,
            descending=asc.counterpart,
            responsibilities=KeyRangePartition.full(asc),
            parent_hashes=tuple((s, self.tips[s].hash) for s in STRANDS),
            prior_nexus=self.nexus[-1].hash,
            join_requests=tuple(sort_nodes(self.pending_joins - self.members)),
            leave_notices=tuple(sort_nodes(self.pending_leaves & self.members)),
        )
        ritual = self._ritual_or_stub(self.tips[asc].configuration)
        self._open_collection("epoch1", block, [ritual.ritual_id], ("epoch", block.epoch, 1, cycle))
        msg = self._msg(Kind.EPOCH_PROPOSAL, asc, block.epoch, block)
        return [Outgoing(msg)] + self._on_epoch_proposal(msg)

    def _open_epoch_stage2(self, block: EpochBlock) -> list[Outgoing]:
        ritual = self._ritual_or_stub(self.tips[block.descending].configuration)
        self._open_collection("epoch2", block, [ritual.ritual_id], ("epoch", block.epoch, 2, block.cycle))
        msg = self._msg(Kind.EPOCH_PROPOSAL, block.ascending, block.epoch, block)
        return [Outgoing(msg)] + self._on_epoch_proposal(msg)

    def _epoch_proposal_problem(self, block: EpochBlock, sender: str) -> str | None:
        if block.cycle != self.cycle:
            return "wrong-cycle"
        if block.cycle - self.genesis_cycle < self.params.cycles_per_epoch:
            return "premature"
        if any(p not in (StrandPhase.DIVERGED, StrandPhase.EPOCH_CONVERGING) for p in self.phase.values()):
            return "not-diverged"
        if block.epoch != (self.last_epoch.epoch if self.last_epoch else 0) + 1:
            return "wrong-epoch"
        if block.ascending != expected_ascending(self.last_epoch) or block.descending != block.ascending.counterpart:
            return Reason.WRONG_ALTERNATION.value
        if block.proposer != sender or self.leaders(block.cycle + 1).get(block.ascending) != sender:
            return "not-leader"
        if dict(block.parent_hashes) != {s: t.hash for s, t in self.tips.items()}:
            return Reason.STALE_TIPS.value
        if block.prior_nexus != self.nexus[-1].hash:
            return "stale-nexus"
        if block.responsibilities != KeyRangePartition.full(block.ascending):
            return Reason.INCOMPLETE_RESPONSIBILITY.value
        members = self.members
        if any(j in members for j in block.join_requests) or any(x not in members for x in block.leave_notices):
            return "bad-churn"
        return None

    def _on_epoch_proposal(self, msg: ProtocolMessage) -> list[Outgoing]:
        block: EpochBlock = msg.payload
        if not isinstance(block, EpochBlock):
            self._reject(msg.sender, "epoch-proposal", "ill-formed")
            return []
        if block.cycle > self.cycle:
            self._buffer.append(msg)
            return []
        if self.last_epoch is not None and block.epoch <= self.last_epoch.epoch:
            return []
        stage = 1 if block.ascending_signature is None else 2
        slot = ("epoch", block.epoch, stage, block.cycle)
        if slot in self._signed:
            return []
        problem = self._epoch_proposal_problem(block, msg.sender)
        if problem is None and stage == 2:
            cfg = self.tips[block.ascending].configuration
            if signature_problem(block.ascending_signature, cfg, block.hash, self.group):
                problem = Reason.BAD_ASCENDING_SIGNATURE.value
        if problem:
            self._reject(msg.sender, "epoch-proposal", problem)
            return []
        self._signed[slot] = block.hash
        for s in STRANDS:
            if self.phase[s] is StrandPhase.DIVERGED:
                self._set_phase(s, StrandPhase.EPOCH_CONVERGING)
        signing = block.ascending if stage == 1 else block.descending
        cfg = self.tips[signing].configuration
        ritual = self.rituals.get(cfg.group_key.ritual_id)
        if ritual is None or ritual.share is None or self.name not in cfg.members:
            return []
        reply = self._msg(Kind.EPOCH_SIGNATURE_SHARE, signing, block.epoch, (block.hash, f"epoch{stage}", (self._sign(ritual, block.hash),)))
        if block.proposer == self.name:
            return self._on_share(reply)
        return [Outgoing(reply, (block.proposer,))]

    def _accept_epoch_block(self, block: EpochBlock, sender: str) -> Verdict | None:
        if block.hash in self.blocks:
            return None
        expected_epoch = (self.last_epoch.epoch if self.last_epoch else 0) + 1
        if block.epoch < expected_epoch:
            return None
        if block.epoch > expected_epoch or self.epoch_pending is not None:
            return None
        verdict = validate_epoch_block(block, self.tips, self.last_epoch, self.group)
        if verdict and block.prior_nexus != self.nexus[-1].hash:
            verdict = Verdict(Reason.STALE_TIPS, "prior nexus")
        if not verdict:
            self._reject(sender, "epoch-block", verdict.reason, verdict.detail)  # type: ignore[arg-type]
            return verdict
        self.blocks[block.hash] = block
        self.nexus.append(block)
        self.last_epoch = block
        self.epoch_pending = block
        for s in STRANDS:
            if self.phase[s] is StrandPhase.DIVERGED:
                self._set_phase(s, StrandPhase.EPOCH_CONVERGING)
        self._set_phase(block.ascending, StrandPhase.DOMINANT_FULL)
        self._set_phase(block.descending, StrandPhase.RESHUFFLING)
        self.partition = block.responsibilities
        prior = self.tips[block.ascending].configuration.members
        plan = plan_membership(prior, block.join_requests, block.leave_notices, self.params.join_threshold)
        self.reshuffle = Reshuffle(block, plan, frozenset(prior), start_cycle=self.cycle + 1)
        self._note("block", block=block)
        self._note("churn-plan", epoch=block.epoch, plan=plan)
        return verdict

    # --- reshuffle and DKG -----------------------------------------------

    def run_reshuffle_subroutine(self) -> list[Outgoing]:
        """Open one DKG round per strand over the post-churn membership and
        send this node's dealings."""
        rs = self.reshuffle
        assert rs is not None
        participants = tuple(sort_nodes(rs.plan.members))
        t = majority_threshold(len(participants))
        out: list[Outgoing] = []
        for s in STRANDS:
            rid = ritual_name(rs.epoch.epoch, s, rs.attempt)
            rnd = DkgRound(rid, s, participants, t)
            rs.rounds[s] = rnd
            if self.name not in participants:
                continue
            dealing = deal(self.name, participants, t, self._rng(rid), self.group)
            for holder in participants:
                share = dealing.shares[holder]
                if holder == self.name:
                    rnd.dealings[self.name] = (dealing.commitment, share)
                    continue
                msg = self._msg(Kind.DKG_DEALING, s, rs.epoch.epoch, (rid, dealing.commitment, share))
                out.append(Outgoing(msg, (holder,)))
        return out

    def _round_for(self, rid: str) -> DkgRound | None:
        if not self.reshuffle:
            return None
        for rnd in self.reshuffle.rounds.values():
            if rnd.ritual_id == rid:
                return rnd
        return None

    def _complain(self, rnd: DkgRound, dealer: str, why: str) -> list[Outgoing]:
        rnd.complaints.add(dealer)
        self._note("dkg-complaint", ritual=rnd.ritual_id, dealer=dealer, why=why)
        others = tuple(p for p in rnd.participants if p != self.name)
        msg = self._msg(Kind.DKG_COMPLAINT, rnd.strand, self.reshuffle.epoch.epoch, (rnd.ritual_id, dealer))  # type: ignore[union-attr]
        return [Outgoing(msg, others)]

    def _on_dkg_dealing(self, msg: ProtocolMessage) -> list[Outgoing]:
        rid, commitment, share = msg.payload
        rnd = self._round_for(rid)
        if rnd is None or self.name not in rnd.participants or msg.sender not in rnd.participants:
            return []
        if msg.sender in rnd.dealings or msg.sender in rnd.complaints:
            return []
        ok = (
            isinstance(commitment, DealingCommitment)
            and isinstance(share, SecretShare)
            and commitment.dealer == msg.sender
            and len(commitment.coefficient_commitments) == rnd.threshold
            and share.holder == self.name
            and share.index == rnd.participants.index(self.name) + 1
            and verify_share(share, commitment, self.group)
        )
        if not ok:
            return self._complain(rnd, msg.sender, "bad share")
        rnd.dealings[msg.sender] = (commitment, share)
        return []

    def _on_dkg_complaint(self, msg: ProtocolMessage) -> list[Outgoing]:
        rid, dealer = msg.payload
        rnd = self._round_for(rid)
        if rnd is not None and msg.sender in rnd.participants and dealer in rnd.participants:
            rnd.complaints.add(dealer)
        return []

    def _close_dkg_rounds(self) -> None:
        rs = self.reshuffle
        assert rs is not None
        results: dict[Strand, Ritual] = {}
        for s, rnd in sorted(rs.rounds.items()):
            qualified = [d for d in rnd.participants if d not in rnd.complaints]
            if len(qualified) < rnd.threshold:
                self._note("dkg", ritual=rnd.ritual_id, ok=False, qualified=qualified)
                continue
            if self.name in rnd.participants and any(d not in rnd.dealings for d in qualified):
                # a qualified dealer we never heard from and never complained about cannot happen
                # under bounded latency; treat as a failed round for this node
                self._note("dkg", ritual=rnd.ritual_id, ok=False, qualified=qualified)
                continue
            results[s] = self._ritual_from_round(rnd, qualified)
            self._note("dkg", ritual=rnd.ritual_id, ok=True, qualified=qualified)
        rs.rounds = {}
        if len(results) == len(STRANDS):
            rs.rituals = results
            for r in results.values():
                if r.share is not None:
                    self.rituals[r.ritual_id] = r
        else:
            rs.attempt += 1

    def _ritual_from_round(self, rnd: DkgRound, qualified: list[str]) -> Ritual:
        p, q = self.group.modulus, self.group.order
        if self.name not in rnd.participants:
            return Ritual(rnd.ritual_id, rnd.participants, rnd.threshold, 0, None, params=self.group)
        commitments = [1] * rnd.threshold
        value = 0
        for dealer in qualified:
            commitment, share = rnd.dealings[dealer]
            value = (value + share.value) % q
            for k, c in enumerate(commitment.coefficient_commitments):
                commitments[k] = commitments[k] * c % p
        index = rnd.participants.index(self.name) + 1
        return Ritual(
            rnd.ritual_id,
            rnd.participants,
            rnd.threshold,
            commitments[0],
            SecretShare(self.name, index, value),
            tuple(commitments),
            self.group,
        )

    # --- epoch genesis ---------------------------------------------------

    def expected_genesis(self, cycle: int) -> EpochGenesisBlock | None:
        """The genesis this node would sign at `cycle`, or None when it
        lacks the keys to build it."""
        rs = self.reshuffle
        if rs is None or not rs.keys_ready or any(r.public_key == 0 for r in rs.rituals.values()):
            return None
        epoch = rs.epoch
        dom, sub = epoch.ascending, epoch.descending
        plan = rs.plan
        kept = set(plan.members)

        def adjusted(order: tuple[str, ...]) -> tuple[str, ...]:
            return tuple(m for m in order if m in kept) + tuple(plan.joined)

        if self.params.reshuffles_topology(epoch.epoch):
            assert epoch.ascending_signature and epoch.descending_signature
            seed = combine_seeds(
                derive_vrf_seed(epoch.ascending_signature, self.group),
                derive_vrf_seed(epoch.descending_signature, self.group),
            )
            sub_order = shuffle_members(sort_nodes(plan.members), seed)
        else:
            sub_order = adjusted(self.tips[sub].configuration.members)
        orders = {sub: sub_order, dom: adjusted(self.tips[dom].configuration.members)}
        partition = self.last_genesis.partition
        configs = tuple(
            NetworkConfiguration(s, orders[s], rs.rituals[s].key_ref, partition.predicate(s), cycle + 1)  # type: ignore[arg-type]
            for s in STRANDS
        )
        # the proposer must also sit in the dominant configuration to collect
        # its countersignatures; rotate among such nodes on every retry
        candidates = [m for m in sub_order if m in rs.prior_members]
        proposer = candidates[(cycle - rs.start_cycle - self.params.reshuffle_duration + 1) % len(candidates)]
        return EpochGenesisBlock(epoch.epoch, cycle, proposer, epoch.hash, dom, sub, configs, partition)

    def _open_genesis(self, block: EpochGenesisBlock) -> list[Outgoing]:
        ritual = self.rituals[block.configuration(block.submissive).group_key.ritual_id]  # type: ignore[arg-type, union-attr]
        self._open_collection("genesis1", block, [ritual.ritual_id], ("genesis", block.epoch, 1, block.cycle))
        msg = self._msg(Kind.GENESIS_PROPOSAL, block.submissive, block.epoch, block)
        return [Outgoing(msg)] + self.handle_genesis_flow(msg)

    def _open_genesis_stage2(self, block: EpochGenesisBlock) -> list[Outgoing]:
        ritual = self._ritual_or_stub(self.tips[block.dominant].configuration)  # type: ignore[index]
        self._open_collection("genesis2", block, [ritual.ritual_id], ("genesis", block.epoch, 2, block.cycle))
        msg = self._msg(Kind.GENESIS_PROPOSAL, block.submissive, block.epoch, block)
        return [Outgoing(msg)] + self.handle_genesis_flow(msg)

    def handle_genesis_flow(self, msg: ProtocolMessage) -> list[Outgoing]:
        """Stage 1: the new submissive configuration signs. Stage 2: the
        dominant configuration countersigns a block carrying stage 1's
        aggregate."""
        block: EpochGenesisBlock = msg.payload
        if not isinstance(block, EpochGenesisBlock):
            self._reject(msg.sender, "genesis-proposal", "ill-formed")
            return []
        if block.cycle > self.cycle or (self.epoch_pending is None and block.epoch > self.last_genesis.epoch):
            self._buffer.append(msg)
            return []
        rs = self.reshuffle
        if rs is None or block.epoch != rs.epoch.epoch or block.cycle < self.cycle:
            return []
        stage = 1 if block.submissive_signature is None else 2
        slot = ("genesis", block.epoch, stage, block.cycle)
        if slot in self._signed:
            return []
        sub, dom = rs.epoch.descending, rs.epoch.ascending
        if stage == 1:
            if self.name not in rs.plan.members:
                return []
            expected = self.expected_genesis(block.cycle)
            if expected is None:
                return []
            if expected.hash != block.hash or block.proposer != msg.sender:
                self._reject(msg.sender, "genesis-proposal", "unexpected-content")
                return []
            self._signed[slot] = block.hash
            self._set_phase(sub, StrandPhase.GENESIS_PENDING)
            cfg = block.configuration(sub)
        else:
            dominant_cfg = self.tips[dom].configuration
            if self.name not in dominant_cfg.members:
                return []
            verdict = validate_epoch_genesis(
                block, rs.epoch, dominant_cfg, rs.prior_members, self.group, check_dominant=False
            )
            if not verdict:
                self._reject(msg.sender, "genesis-proposal", verdict.reason)  # type: ignore[arg-type]
                return []
            expected = self.expected_genesis(block.cycle) if self.name in rs.plan.members else None
            if expected is not None and expected.hash != block.hash:
                self._reject(msg.sender, "genesis-proposal", "unexpected-content")
                return []
            self._signed[slot] = block.hash
            cfg = dominant_cfg
        assert cfg is not None
        ritual = self.rituals.get(cfg.group_key.ritual_id)
        if ritual is None or ritual.share is None:
            return []
        signing = sub if stage == 1 else dom
        share = (block.hash, f"genesis{stage}", (self._sign(ritual, block.hash),))
        reply = self._msg(Kind.GENESIS_SIGNATURE_SHARE, signing, block.epoch, share)
        if block.proposer == self.name:
            return self._on_share(reply)
        return [Outgoing(reply, (block.proposer,))]

    def _accept_genesis(self, block: EpochGenesisBlock, sender: str) -> Verdict | None:
        if block.hash in self.blocks:
            return None
        rs = self.reshuffle
        if rs is None or self.epoch_pending is None or block.epoch != rs.epoch.epoch:
            return None
        dom, sub = rs.epoch.ascending, rs.epoch.descending
        verdict = validate_epoch_genesis(block, rs.epoch, self.tips[dom].configuration, rs.prior_members, self.group)
        if not verdict:
            self._reject(sender, "genesis-block", verdict.reason, verdict.detail)  # type: ignore[arg-type]
            return verdict
        self.blocks[block.hash] = block
        self.nexus.append(block)
        self.last_genesis = block
        self.genesis_cycle = self.cycle
        self.epoch_pending = None
        self.reshuffle = None
        self._set_phase(sub, StrandPhase.GENESIS_PENDING)
        self._set_phase(sub, StrandPhase.DIVERGED)
        self._set_phase(dom, StrandPhase.GENESIS_PENDING)
        old_sub = self.tips[sub]
        self.tips[sub] = Tip(old_sub.hash, old_sub.height, block.configuration(sub))  # type: ignore[arg-type]
        old_dom = self.tips[dom]
        self.tips[dom] = Tip(old_dom.hash, old_dom.height, old_dom.configuration, block.configuration(dom))
        self.partition = block.partition
        members = block.members
        self.pending_joins = {j for j in self.pending_joins if j not in members}
        self.pending_leaves = {x for x in self.pending_leaves if x in members}
        self._note("block", block=block)
        return verdict

    # --- dispatch ----------------------------------------------------------

    def handle_message(self, msg: ProtocolMessage) -> list[Outgoing]:
        if not isinstance(msg, ProtocolMessage) or not isinstance(msg.kind, Kind):
            self._note("drop", why="ill-formed message")
            return []
        try:
            return self._dispatch(msg)
        except (TypeError, ValueError, KeyError, AttributeError) as exc:
            self._reject(msg.sender, msg.kind.value, "ill-formed", str(exc))
            return []

    def _dispatch(self, msg: ProtocolMessage) -> list[Outgoing]:
        k = msg.kind
        if k is Kind.CYCLE_PROPOSAL:
            return self._on_cycle_proposal(msg)
        if k in (Kind.CYCLE_SIGNATURE_SHARE, Kind.EPOCH_SIGNATURE_SHARE, Kind.GENESIS_SIGNATURE_SHARE):
            return self._on_share(msg)
        if k is Kind.EPOCH_PROPOSAL:
            return self._on_epoch_proposal(msg)
        if k is Kind.GENESIS_PROPOSAL:
            return self.handle_genesis_flow(msg)
        if k is Kind.DKG_DEALING:
            return self._on_dkg_dealing(msg)
        if k is Kind.DKG_COMPLAINT:
            return self._on_dkg_complaint(msg)
        if k is Kind.JOIN_REQUEST:
            if msg.sender not in self.members:
                self.pending_joins.add(msg.sender)
            return []
        if k is Kind.LEAVE_NOTICE:
            if msg.sender in self.members:
                self.pending_leaves.add(msg.sender)
            return []
        if k is Kind.BLOCK_ANNOUNCEMENT:
            return self._on_announcement(msg)
        return []

    def _on_announcement(self, msg: ProtocolMessage) -> list[Outgoing]:
        block = msg.payload
        if isinstance(block, CycleBlock):
            if block.height > self.tips[block.strand].height + 1:
                self._buffer.append(msg)
                return []
            verdict = self._accept_cycle_block(block, msg.sender)
        elif isinstance(block, EpochBlock):
            expected_epoch = (self.last_epoch.epoch if self.last_epoch else 0) + 1
            if block.epoch > expected_epoch or (block.epoch == expected_epoch and self.epoch_pending is not None):
                self._buffer.append(msg)
                return []
            verdict = self._accept_epoch_block(block, msg.sender)
        elif isinstance(block, EpochGenesisBlock):
            if self.epoch_pending is None or block.epoch > self.epoch_pending.epoch:
                if block.epoch > self.last_genesis.epoch:
                    self._buffer.append(msg)
                return []
            verdict = self._accept_genesis(block, msg.sender)
        else:
            self._reject(msg.sender, "announcement", "ill-formed")
            return []
        return self._drain_buffer() if verdict else []

    def _drain_buffer(self) -> list[Outgoing]:
        out: list[Outgoing] = []
        progress = True
        while progress and self._buffer:
            progress = False
            pending, self._buffer = self._buffer, []
            for msg in pending:
                before = len(self._buffer)
                out += self.handle_message(msg)
                if len(self._buffer) == before:
                    progress = True
            # messages from long-gone cycles are dropped
            self._buffer = [m for m in self._buffer if _msg_cycle(m) is None or _msg_cycle(m) >= self.cycle - 2]
        return out


def _msg_cycle(msg: ProtocolMessage) -> int | None:
    return getattr(msg.payload, "cycle", None)
