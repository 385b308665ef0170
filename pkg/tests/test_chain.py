from __future__ import annotations

from dataclasses import replace

import pytest

from blockfactory import EPOCH_DEFECTS, GENESIS_DEFECTS, World, corrupt_epoch, corrupt_genesis
from unitychain.chain import (
    CycleBlock,
    ProtocolParams,
    Reason,
    Tip,
    block_from_record,
    block_record,
    build_origin_block,
    encode_canonical,
    hash_block,
    next_configuration,
    validate_cycle_block,
    validate_epoch_block,
    validate_epoch_genesis,
)
from unitychain.crypto import aggregate, sign_share
from unitychain.topology import KeyRangePartition, Strand, permute_configuration

POS, NEG = Strand.POSITIVE, Strand.NEGATIVE


@pytest.fixture(scope="module")
def world():
    return World(n=8, seed=11)


def test_hash_determinism_and_sensitivity(world):
    a = world.cycle_block(POS, 0, (b"\x01" * 32,))
    b = world.cycle_block(POS, 0, (b"\x01" * 32,))
    c = world.cycle_block(POS, 0, (b"\x02" * 32,))
    assert a.hash == b.hash == hash_block(a)
    assert a.hash != c.hash
    assert len(a.hash) == 32


def test_signing_does_not_change_hash(world):
    block = world.cycle_block(POS, 0)
    unsigned = replace(block, signature=None, configuration=None)
    assert hash_block(unsigned) == block.hash


def test_canonical_encoding_is_typed():
    assert encode_canonical(1) != encode_canonical("1") != encode_canonical(b"1")
    assert encode_canonical((1, 2)) != encode_canonical((12,))
    assert encode_canonical(-1) != encode_canonical(1)


def test_record_round_trip(world):
    epoch = world.epoch_block()
    genesis = world.genesis_block(epoch)
    for block in (world.origin, world.genesis, world.cycle_block(NEG, 0, (b"a" * 32,)), epoch, genesis):
        again = block_from_record(block_record(block))
        assert again == block
        assert hash_block(again) == block.hash


def test_honest_cycle_block_accepted(world):
    block = world.cycle_block(POS, 0)
    assert validate_cycle_block(block, world.tips[POS])


def test_cycle_block_rejections(world):
    tip = world.tips[POS]
    block = world.cycle_block(POS, 0)
    assert validate_cycle_block(replace(block, parent_hash=bytes(32)), tip).reason is Reason.BAD_PARENT
    assert validate_cycle_block(replace(block, height=5), tip).reason is Reason.BAD_HEIGHT
    sig = block.signature
    flipped = replace(block, signature=replace(sig, value=sig.value ^ 1))
    assert validate_cycle_block(flipped, tip).reason is Reason.BAD_SIGNATURE
    material = world.materials[tip.configuration.group_key.ritual_id]
    t = tip.configuration.threshold
    short = aggregate([sign_share(material, m, block.hash) for m in tip.configuration.members[: t - 1]], t - 1)
    assert validate_cycle_block(replace(block, signature=short), tip).reason is Reason.SUB_MAJORITY
    wrong = permute_configuration(tip.configuration, bytes(32), active_from=1)
    assert validate_cycle_block(replace(block, configuration=wrong), tip).reason is Reason.TOPOLOGY_MISMATCH


def test_cycle_block_signed_by_other_strand_rejected(world):
    block = world.cycle_block(POS, 0)
    other = world.sign(world.tips[NEG].configuration, block.hash)
    assert validate_cycle_block(replace(block, signature=other), world.tips[POS]).reason is Reason.BAD_SIGNATURE


def test_successive_cycle_blocks_chain(world):
    w = World(n=6, seed=3)
    for cycle in range(4):
        for s in (POS, NEG):
            tip = w.tips[s]
            block = w.advance(s, cycle)
            assert validate_cycle_block(block, tip)
            assert block.height == cycle + 1


def test_handoff_tip_needs_both_signatures():
    w = World(n=6, seed=4)
    epoch = w.epoch_block()
    genesis = w.genesis_block(epoch)
    dom = epoch.ascending
    old = w.tips[dom]
    w.tips[dom] = Tip(old.hash, old.height, old.configuration, genesis.configuration(dom))
    block = CycleBlock(dom, old.height + 1, 12, old.hash, old.configuration.members[0], ())
    signed = replace(
        block,
        signature=w.sign(old.configuration, block.hash),
        handoff_signature=w.sign(genesis.configuration(dom), block.hash),
    )
    signed = replace(signed, configuration=next_configuration(genesis.configuration(dom), signed, True))
    assert validate_cycle_block(signed, w.tips[dom])
    missing = replace(signed, handoff_signature=None)
    assert validate_cycle_block(missing, w.tips[dom]).reason is Reason.BAD_SIGNATURE


def test_honest_epoch_block_accepted(world):
    assert validate_epoch_block(world.epoch_block(), world.tips, None)


@pytest.mark.parametrize("defect", EPOCH_DEFECTS)
def test_epoch_block_defects(world, defect):
    block, reason = corrupt_epoch(world, world.epoch_block(), defect)
    assert validate_epoch_block(block, world.tips, None).reason is reason


def test_epoch_alternation_sequence():
    w = World(n=6, seed=5)
    first = w.epoch_block(epoch=1)
    assert first.ascending is NEG
    second = w.epoch_block(epoch=2, cycle=20, prior=first)
    assert second.ascending is POS
    assert validate_epoch_block(second, w.tips, first)
    again = w.sign_epoch(replace(second, ascending=NEG, descending=POS, responsibilities=KeyRangePartition.full(NEG)))
    assert validate_epoch_block(again, w.tips, first).reason is Reason.WRONG_ALTERNATION


def test_epoch_block_with_stale_tip(world):
    block = world.epoch_block()
    stale = world.sign_epoch(replace(block, parent_hashes=((POS, bytes(32)), (NEG, world.tips[NEG].hash))))
    assert validate_epoch_block(stale, world.tips, None).reason is Reason.STALE_TIPS


def test_honest_genesis_accepted(world):
    epoch = world.epoch_block()
    block = world.genesis_block(epoch)
    dom = world.tips[epoch.ascending].configuration
    assert validate_epoch_genesis(block, epoch, dom, dom.members)


@pytest.mark.parametrize("defect", GENESIS_DEFECTS)
def test_genesis_defects(world, defect):
    epoch = world.epoch_block()
    block, reason = corrupt_genesis(world, epoch, defect)
    dom = world.tips[epoch.ascending].configuration
    assert validate_epoch_genesis(block, epoch, dom, dom.members).reason is reason


def test_genesis_carryover_boundaries(world):
    epoch = world.epoch_block()
    dom = world.tips[epoch.ascending].configuration
    prior = dom.members
    # 6 of 8 retained (75%) passes
    keep = prior[:6] + ("y000", "y001")
    assert validate_epoch_genesis(world.genesis_block(epoch, members=keep), epoch, dom, prior)
    # 2 of 8 retained (25%) fails
    keep = prior[:2] + tuple(f"y{i:03d}" for i in range(6))
    verdict = validate_epoch_genesis(world.genesis_block(epoch, members=keep), epoch, dom, prior)
    assert verdict.reason is Reason.CARRYOVER_VIOLATION


def test_bootstrap_genesis_validates_against_origin(world):
    assert validate_epoch_genesis(world.genesis, world.origin, world.origin.configuration, world.origin.members)


def test_origin_block():
    origin = build_origin_block(["a", "b", "c", "d"], ProtocolParams())
    assert origin.height == 0
    assert origin.configuration.responsibility.everything
    assert origin.hash == build_origin_block(["a", "b", "c", "d"], ProtocolParams()).hash
    with pytest.raises(ValueError):
        build_origin_block(["a", "b", "c"])
    with pytest.raises(ValueError):
        build_origin_block(["a", "a", "b", "c"])
