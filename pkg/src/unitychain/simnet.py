"""Deterministic discrete-event simulation of a Unitychain network.

Events are processed in (deliver_at, seq) order; seq is a global counter,
so the schedule is total and a scenario plus seed always yields the same
event log, byte for byte.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .chain import (
    CycleBlock,
    EpochBlock,
    EpochGenesisBlock,
    OriginBlock,
    Tip,
    block_record,
    build_origin_block,
    validate_cycle_block,
    validate_epoch_block,
    validate_epoch_genesis,
)
from .crypto import DEFAULT_PARAMS, aggregate, derive_vrf_seed, combine_seeds, run_dkg, sign_share
from .engine import NodeEngine, Outgoing, ProtocolMessage, Ritual, StrandPhase, is_legal_history
from .scenario import Behavior, FaultSpec, ScenarioConfig, Transaction, Workload, scenario_record
from .topology import (
    STRANDS,
    GroupKeyRef,
    KeyRangePartition,
    NetworkConfiguration,
    PartitionMode,
    check_partition,
    majority_threshold,
    shuffle_members,
    sort_nodes,
)

LOG_VERSION = 1


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimerTick:
    kind: str  # cycle | complaint | epoch
    cycle: int


class SimEvent(NamedTuple):
    deliver_at: int
    seq: int
    target: str
    payload: ProtocolMessage | TimerTick


@dataclass
class Bootstrap:
    origin: OriginBlock
    genesis: EpochGenesisBlock
    materials: list


def _seed_bytes(seed: int, label: str) -> bytes:
    return hashlib.sha256(f"unitychain/{label}/{seed}".encode()).digest()


def bootstrap(cfg: ScenarioConfig) -> Bootstrap:
    """Origin ritual, origin block and the epoch-0 genesis that splits the
    origin membership into the two initial strand configurations. The
    rituals here run in-process before the clock starts."""
    members = tuple(sort_nodes(cfg.initial_members))
    t = majority_threshold(len(members))
    rng = random.Random(int.from_bytes(_seed_bytes(cfg.seed, "bootstrap"), "big"))
    origin_keys = run_dkg(members, t, rng, DEFAULT_PARAMS, "origin")
    origin = build_origin_block(members, cfg.protocol_params, GroupKeyRef("origin", origin_keys.group_public_key, t))
    boot_sig = _sign_all(origin_keys, members[:t], origin.hash)
    from dataclasses import replace

    origin = replace(origin, bootstrap_signature=boot_sig)
    strand_keys = {s: run_dkg(members, t, rng, DEFAULT_PARAMS, f"e0{s.value}a0") for s in STRANDS}
    vrf = derive_vrf_seed(boot_sig)
    configs = tuple(
        NetworkConfiguration(
            s,
            shuffle_members(members, combine_seeds(vrf, s.value.encode())),
            GroupKeyRef(strand_keys[s].ritual_id, strand_keys[s].group_public_key, t),
            cfg.partition.predicate(s),  # type: ignore[arg-type]
            0,
        )
        for s in STRANDS
    )
    genesis = EpochGenesisBlock(0, -1, members[0], origin.hash, None, None, configs, cfg.partition)
    sig = _sign_all(origin_keys, members[:t], genesis.hash)
    genesis = replace(genesis, submissive_signature=sig, dominant_signature=sig)
    return Bootstrap(origin, genesis, [origin_keys, *strand_keys.values()])


def _sign_all(material, signers, message):
    shares = [sign_share(material, name, message) for name in signers]
    return aggregate(shares, material.threshold, material.params)


def generate_workload(workload: Workload, seed: int, cycles: int, cycle_ticks: int = 100) -> list[list[Transaction]]:
    """Per-cycle transaction batches with keys uniform over 64 bits."""
    rng = np.random.default_rng(np.frombuffer(_seed_bytes(seed, "workload"), dtype=np.uint32))
    if workload.arrival == "poisson":
        counts = rng.poisson(workload.rate, size=cycles)
    else:
        counts = np.full(cycles, int(workload.rate))
    batches = []
    serial = 0
    for c in range(cycles):
        keys = rng.integers(0, 2**64, size=int(counts[c]), dtype=np.uint64, endpoint=False)
        batch = []
        for k in keys.tolist():
            digest = hashlib.sha256(f"unitychain/tx/{seed}/{serial}/{k}".encode()).digest()
            batch.append(Transaction(int(k), digest, c * cycle_ticks))
            serial += 1
        batches.append(batch)
    return batches


class Simulation:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg.validate()
        self.params = cfg.protocol_params
        self.T = cfg.cycle_ticks
        self.universe = cfg.universe
        self.boot = bootstrap(cfg)
        self.engines: dict[str, NodeEngine] = {}
        for name in self.universe:
            rituals = [Ritual.from_material(m, name) for m in self.boot.materials]
            self.engines[name] = NodeEngine(
                name, self.params, self.boot.origin, self.boot.genesis, rituals, _seed_bytes(cfg.seed, "node/" + name)
            )
        self.latency_rng = random.Random(int.from_bytes(_seed_bytes(cfg.seed, "latency"), "big"))
        self.workload = generate_workload(cfg.workload, cfg.seed, cfg.horizon, self.T)
        self.queue: list[SimEvent] = []
        self.seq = 0
        self.now = 0
        self.faults: dict[str, FaultSpec] = {}
        self.active: dict[str, Behavior] = {}
        self.log: list[dict] = []
        self.logged_blocks: set[bytes] = set()
        self.logged_rituals: set[str] = set()
        self.submitted: list[bytes] = []
        self.finalized_count = 0
        self.violations: list[str] = []
        for f in cfg.faults:
            self.inject_fault(f)

    # --- setup -------------------------------------------------------------

    def inject_fault(self, spec: FaultSpec) -> None:
        if spec.node in self.faults:
            raise SimulationError(f"duplicate fault on node {spec.node}")
        if spec.node not in self.engines:
            raise SimulationError(f"fault names unknown node {spec.node}")
        self.faults[spec.node] = spec

    @property
    def honest(self) -> list[str]:
        """Nodes that follow the protocol throughout (colluders included)."""
        return [n for n in self.universe if n not in self.faults or self.faults[n].behavior is Behavior.COLLUDER]

    @property
    def reference(self) -> NodeEngine:
        return self.engines[self.honest[0]]

    # --- event plumbing ----------------------------------------------------

    def _push(self, at: int, target: str, payload: ProtocolMessage | TimerTick) -> None:
        heapq.heappush(self.queue, SimEvent(at, self.seq, target, payload))
        self.seq += 1

    def _emit(self, record: dict) -> None:
        self.log.append({"v": LOG_VERSION, **record})

    def _delay(self) -> int:
        lat = self.cfg.latency
        return lat.lo if lat.mode == "constant" else self.latency_rng.randint(lat.lo, lat.hi)

    def _blocked(self, name: str) -> bool:
        return self.active.get(name) in (Behavior.CRASH, Behavior.SILENT)

    def _send(self, sender: str, outs: list[Outgoing]) -> None:
        engine = self.engines[sender]
        self._collect_notes(engine)
        if self._blocked(sender):
            return
        for out in outs:
            targets = out.to if out.to is not None else [n for n in self.universe if n != sender]
            for target in targets:
                self._push(self.now + self._delay(), target, out.msg)

    def _collect_notes(self, engine: NodeEngine) -> None:
        notes, engine.notes = engine.notes, []
        for event, data in notes:
            if event == "block":
                block = data["block"]
                if block.hash not in self.logged_blocks:
                    self.logged_blocks.add(block.hash)
                    if isinstance(block, CycleBlock):
                        self.finalized_count += len(block.tx_summary)
                    self._emit({"type": "block", "tick": self.now, "hash": block.hash.hex(), "block": block_record(block)})
            elif event == "phase":
                self._emit({"type": "phase", "tick": self.now, "node": engine.name, **data})
            elif event == "dkg":
                rnd = data["ritual"]
                if rnd not in self.logged_rituals and engine.name in self.honest and engine.reshuffle is not None:
                    self.logged_rituals.add(rnd)
                    self._emit({"type": "dkg", "tick": self.now, "ritual": rnd, "ok": data["ok"], "qualified": data["qualified"]})
            elif event == "equivocation":
                self._emit({"type": "equivocation", "tick": self.now, "node": engine.name, **data})
            elif event == "reject":
                self._emit({"type": "reject", "tick": self.now, "node": engine.name, **data})
            elif event == "churn-plan":
                if engine is self.reference:
                    plan = data["plan"]
                    self._emit(
                        {
                            "type": "churn-plan",
                            "tick": self.now,
                            "epoch": data["epoch"],
                            "joined": list(plan.joined),
                            "left": list(plan.left),
                            "deferred_joins": list(plan.deferred_joins),
                            "deferred_leaves": list(plan.deferred_leaves),
                        }
                    )

    def _dispatch(self, ev: SimEvent) -> None:
        engine = self.engines[ev.target]
        if self.active.get(ev.target) is Behavior.CRASH:
            return
        p = ev.payload
        if isinstance(p, TimerTick):
            if p.kind == "cycle":
                outs = engine.on_cycle_tick(p.cycle)
            elif p.kind == "complaint":
                outs = engine.on_complaint_deadline(p.cycle)
            else:
                outs = engine.on_epoch_tick(p.cycle)
        else:
            outs = engine.handle_message(p)
        self._send(ev.target, outs)

    def _run_until(self, tick: int) -> None:
        while self.queue and self.queue[0].deliver_at <= tick:
            ev = heapq.heappop(self.queue)
            self.now = ev.deliver_at
            self._dispatch(ev)

    # --- cycle driver --------------------------------------------------------

    def _start_cycle(self, c: int) -> None:
        self.now = base = c * self.T
        for name in sorted(self.faults):
            f = self.faults[name]
            if f.at_cycle == c:
                self.active[name] = f.behavior
                self.engines[name].equivocate = f.behavior is Behavior.EQUIVOCATE
                self._emit({"type": "fault", "tick": base, "node": name, "behavior": f.behavior.value, "coalition": f.coalition_id})
        batch = self.workload[c]
        for engine in self.engines.values():
            engine.submit(batch)
        self.submitted.extend(tx.digest for tx in batch)
        for ev in self.cfg.churn:
            if ev.cycle != c:
                continue
            engine = self.engines[ev.node]
            outs = engine.request_join() if ev.action == "join" else engine.notify_leave()
            self._emit({"type": "churn", "tick": base, "node": ev.node, "action": ev.action, "sent": bool(outs)})
            self._send(ev.node, outs)
        ref = self.reference
        leaders = ref.leaders(c)
        configs = ref.producing()
        self._emit(
            {
                "type": "cycle-start",
                "cycle": c,
                "tick": base,
                "partition": ref.partition.describe(),
                "phases": {s.value: ref.phase[s].value for s in STRANDS},
                "leaders": {s.value: leaders[s] for s in sorted(leaders)},
                "configs": {s.value: list(configs[s].members) for s in sorted(configs)},
                "submitted": len(batch),
            }
        )
        for name in self.universe:
            self._push(base, name, TimerTick("cycle", c))
        for name in self.universe:
            self._push(base + self.T // 4, name, TimerTick("complaint", c))
        for name in self.universe:
            self._push(base + self.T // 2, name, TimerTick("epoch", c))

    def _end_cycle(self, c: int) -> None:
        self.now = (c + 1) * self.T - 1
        ref = self.reference
        self._check_partition(c, ref)
        self._emit(
            {
                "type": "cycle-end",
                "cycle": c,
                "tick": self.now,
                "pending": len(self.submitted) - self.finalized_count,
                "partition": ref.partition.describe(),
            }
        )

    def _check_partition(self, c: int, ref: NodeEngine) -> None:
        problem = check_partition(ref.partition)
        if problem:
            self.violations.append(f"cycle {c}: partition {problem}")
        dominant = [s for s in STRANDS if ref.phase[s] is StrandPhase.DOMINANT_FULL]
        if dominant and ref.partition != KeyRangePartition.full(dominant[0]):
            self.violations.append(f"cycle {c}: epoch partition is not full:{dominant[0].value}")
        if not dominant and ref.partition.mode is PartitionMode.FULL:
            self.violations.append(f"cycle {c}: full partition outside an epoch")

    def run(self) -> SimulationResult:
        cfg = self.cfg
        self._emit({"type": "run", "scenario": scenario_record(cfg), "universe": list(self.universe)})
        self._emit({"type": "block", "tick": 0, "hash": self.boot.origin.hash.hex(), "block": block_record(self.boot.origin)})
        self._emit({"type": "block", "tick": 0, "hash": self.boot.genesis.hash.hex(), "block": block_record(self.boot.genesis)})
        self.logged_blocks |= {self.boot.origin.hash, self.boot.genesis.hash}
        for c in range(cfg.horizon):
            self._start_cycle(c)
            self._run_until((c + 1) * self.T - 2)
            self._end_cycle(c)
        self.violations.extend(self.check_invariants())
        self._emit(
            {
                "type": "end",
                "tick": cfg.horizon * self.T,
                "submitted": len(self.submitted),
                "finalized": self.finalized_count,
                "pending": len(self.submitted) - self.finalized_count,
                "violations": self.violations,
            }
        )
        return SimulationResult(self.log, self.violations, self)

    # --- invariants ---------------------------------------------------------

    def check_invariants(self) -> list[str]:
        problems = audit_log(self.log)
        honest = [self.engines[n] for n in self.honest]
        for e in self.engines.values():
            for s in STRANDS:
                if not is_legal_history(e.phase_history[s]):
                    problems.append(f"{e.name}: illegal phase history on strand {s.value}")
        nexus = [tuple(b.hash for b in e.nexus) for e in honest]
        if len(set(nexus)) > 1:
            problems.append("honest nodes disagree on the epoch nexus")
        honest_names = set(self.honest)
        for e in honest:
            for sender, what, reason in e.rejections:
                if sender in honest_names:
                    problems.append(f"{e.name} rejected {what} from honest {sender}: {reason}")
                    break
        ref = self.reference
        finalized: list[bytes] = [d for b in ref.blocks.values() if isinstance(b, CycleBlock) for d in b.tx_summary]
        if len(finalized) != len(set(finalized)):
            problems.append("a transaction was finalized twice")
        pending = set(ref.pool)
        submitted = set(self.submitted)
        if set(finalized) & pending:
            problems.append("a transaction is both finalized and pending")
        if set(finalized) | pending != submitted:
            problems.append("transactions lost or invented")
        return problems


@dataclass
class SimulationResult:
    log: list[dict]
    violations: list[str]
    sim: Simulation | None = None

    @property
    def ok(self) -> bool:
        return not self.violations

    def log_text(self) -> str:
        return dumps_log(self.log)


def dumps_log(log: Iterable[dict]) -> str:
    return "".join(json.dumps(rec, separators=(",", ":")) + "\n" for rec in log)


def run_simulation(cfg: ScenarioConfig) -> SimulationResult:
    return Simulation(cfg).run()


def audit_log(log: list[dict]) -> list[str]:
    """Replay every logged block through the validators as a fresh observer
    would: chain linkage, dual-majority signatures and alternation."""
    from .chain import block_from_record

    blocks = [block_from_record(r["block"]) for r in log if r.get("type") == "block"]
    if len(blocks) < 2 or not isinstance(blocks[0], OriginBlock) or not isinstance(blocks[1], EpochGenesisBlock):
        return ["log does not start with origin and bootstrap genesis"]
    params = blocks[0].params
    genesis = blocks[1]
    problems = []
    if validate_epoch_genesis(genesis, blocks[0], blocks[0].configuration, blocks[0].members).reason is not None:
        problems.append("bootstrap genesis does not validate against the origin")
    tips = {s: Tip(genesis.hash, 0, genesis.configuration(s)) for s in STRANDS}  # type: ignore[arg-type]
    last_epoch: EpochBlock | None = None
    pending: EpochBlock | None = None
    nexus = genesis.hash
    for b in blocks[2:]:
        if isinstance(b, CycleBlock):
            v = validate_cycle_block(b, tips[b.strand], DEFAULT_PARAMS, params.permutes_each_cycle)
            if not v:
                problems.append(f"cycle block {b.strand.value}{b.height}: {v.reason.value}")  # type: ignore[union-attr]
                continue
            tips[b.strand] = Tip.of(b)
        elif isinstance(b, EpochBlock):
            v = validate_epoch_block(b, tips, last_epoch)
            if v and (b.prior_nexus != nexus or pending is not None):
                problems.append(f"epoch {b.epoch}: nexus out of order")
            if not v:
                problems.append(f"epoch {b.epoch}: {v.reason.value}")  # type: ignore[union-attr]
                continue
            last_epoch = pending = b
            nexus = b.hash
        elif isinstance(b, EpochGenesisBlock):
            if pending is None:
                problems.append(f"genesis {b.epoch} without an open epoch")
                continue
            dom, sub = pending.ascending, pending.descending
            prior = tips[dom].configuration.members
            v = validate_epoch_genesis(b, pending, tips[dom].configuration, prior)
            if not v:
                problems.append(f"genesis {b.epoch}: {v.reason.value}")  # type: ignore[union-attr]
                continue
            tips[sub] = Tip(tips[sub].hash, tips[sub].height, b.configuration(sub))  # type: ignore[arg-type]
            tips[dom] = Tip(tips[dom].hash, tips[dom].height, tips[dom].configuration, b.configuration(dom))
            pending = None
            nexus = b.hash
    return problems


def load_log(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]
