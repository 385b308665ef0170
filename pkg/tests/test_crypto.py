from __future__ import annotations

import random
from itertools import combinations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unitychain.crypto import (
    DEFAULT_PARAMS,
    MERSENNE_61,
    AggregateSignature,
    DkgFailure,
    GroupParams,
    SecretShare,
    aggregate,
    deal,
    derive_vrf_seed,
    evaluate_polynomial,
    finish_dkg,
    run_dkg,
    shamir_reconstruct,
    shamir_split,
    sign_share,
    sign_with_share,
    unique_signature,
    verify_aggregate,
    verify_share,
    verify_signature_share,
)

SMALL = GroupParams.for_order(97)


class FixedRng:
    """Feeds fixed polynomial coefficients to shamir_split."""

    def __init__(self, values):
        self.values = list(values)

    def randrange(self, *_):
        return self.values.pop(0)


def test_default_group_is_prime_order_subgroup():
    from sympy import isprime

    p = DEFAULT_PARAMS
    assert p.order == MERSENNE_61 == 2305843009213693951
    assert isprime(p.modulus) and (p.modulus - 1) % p.order == 0
    assert p.generator != 1 and pow(p.generator, p.order, p.modulus) == 1
    assert p.element_bytes == 9


def test_small_params():
    assert SMALL.order == 97
    assert (SMALL.modulus - 1) % 97 == 0
    assert pow(SMALL.generator, 97, SMALL.modulus) == 1


def test_split_hand_vector():
    # f(x) = 5 + 3x over F_97
    shares, commitment = shamir_split(5, 3, 2, FixedRng([3]), SMALL)
    assert [(s.index, s.value) for s in shares] == [(1, 8), (2, 11), (3, 14)]
    assert commitment.coefficient_commitments == (SMALL.exp(5), SMALL.exp(3))
    assert all(verify_share(s, commitment, SMALL) for s in shares)


def test_split_single_zero_share():
    shares, _ = shamir_split(0, 1, 1, FixedRng([]), SMALL)
    assert [(s.index, s.value) for s in shares] == [(1, 0)]


def test_reconstruct_hand_vector():
    shares = [SecretShare("a", 1, 8), SecretShare("b", 2, 11), SecretShare("c", 3, 14)]
    # oracle: solve a0 + a1*x = y for x=1,2 by hand: a1 = 3, a0 = 5
    assert shamir_reconstruct(shares[:2], 2, SMALL) == 5
    assert shamir_reconstruct(shares[1:], 2, SMALL) == 5


@pytest.mark.parametrize("c", [0, 1, 42, 96])
def test_reconstruct_constant(c):
    shares = [SecretShare(str(i), i, c) for i in (1, 2, 3)]
    assert shamir_reconstruct(shares, 2, SMALL) == c


def test_reconstruct_errors():
    s = SecretShare("a", 1, 8)
    with pytest.raises(ValueError):
        shamir_reconstruct([s, s], 2, SMALL)
    with pytest.raises(ValueError):
        shamir_reconstruct([s], 2, SMALL)


@pytest.mark.parametrize("t,n", [(0, 3), (4, 3)])
def test_split_rejects_bad_threshold(t, n):
    with pytest.raises(ValueError):
        shamir_split(1, n, t, random.Random(0))


@settings(max_examples=40, deadline=None)
@given(secret=st.integers(0, MERSENNE_61 - 1), n=st.integers(1, 8), data=st.data())
def test_split_reconstruct_round_trip(secret, n, data):
    t = data.draw(st.integers(1, n))
    shares, commitment = shamir_split(secret, n, t, random.Random(data.draw(st.integers(0, 2**32))))
    subset = data.draw(st.permutations(shares))[:t]
    assert shamir_reconstruct(subset, t) == secret
    for s in shares:
        assert verify_share(s, commitment)
        assert not verify_share(SecretShare(s.holder, s.index, s.value + 1), commitment)


def test_shares_are_polynomial_evaluations():
    shares, _ = shamir_split(11, 5, 3, FixedRng([7, 13]), SMALL)
    assert [s.value for s in shares] == [evaluate_polynomial([11, 7, 13], i, 97) for i in range(1, 6)]


def test_dkg_agreement_and_signing():
    names = ["a", "b", "c", "d"]
    material = run_dkg(names, 3, random.Random(1))
    # oracle: reconstruct the group secret and exponentiate directly
    secret = shamir_reconstruct(list(material.member_shares.values())[:3], 3)
    assert DEFAULT_PARAMS.exp(secret) == material.group_public_key
    msg = b"block"
    shares = [sign_share(material, n, msg) for n in names]
    for s in shares:
        assert verify_signature_share(s, material.public_shares[s.signer], msg)
    expected = pow(DEFAULT_PARAMS.hash_to_group(msg), secret, DEFAULT_PARAMS.modulus)
    sigs = {aggregate(list(sub), 3).value for sub in combinations(shares, 3)}
    assert sigs == {expected}
    assert aggregate(shares[::-1][:3], 3).value == expected
    assert verify_aggregate(aggregate(shares[:3], 3), material.group_public_key, msg)


def test_dkg_excludes_corrupted_dealer():
    names = ["a", "b", "c", "d"]
    rng = random.Random(2)
    dealings = [deal(n, names, 3, rng) for n in names]
    bad = dealings[1]
    shares = dict(bad.shares)
    shares["c"] = SecretShare("c", shares["c"].index, shares["c"].value + 1)
    dealings[1] = type(bad)(bad.dealer, bad.commitment, shares)
    material = finish_dkg(dealings, names, 3)
    assert material.qualified == ("a", "c", "d")
    honest = finish_dkg([dealings[i] for i in (0, 2, 3)], names, 3)
    assert material.group_public_key == honest.group_public_key


def test_dkg_too_few_participants():
    with pytest.raises(DkgFailure):
        run_dkg(["a", "b"], 3, random.Random(0))


def test_sign_share_deterministic_and_message_bound():
    material = run_dkg(["a", "b", "c", "d"], 3, random.Random(4))
    assert sign_share(material, "a", b"m") == sign_share(material, "a", b"m")
    assert sign_share(material, "a", b"m").value != sign_share(material, "a", b"m2").value
    with pytest.raises(KeyError):
        sign_share(material, "zz", b"m")


def test_zero_share_signs_identity():
    assert sign_with_share(SecretShare("a", 1, 0), b"m").value == 1


def test_aggregate_errors():
    material = run_dkg(["a", "b", "c", "d"], 3, random.Random(5))
    s1 = sign_share(material, "a", b"x")
    s2 = sign_share(material, "b", b"y")
    with pytest.raises(ValueError):
        aggregate([s1, s2], 2)
    with pytest.raises(ValueError):
        aggregate([s1], 3)


def test_verify_aggregate_rejections():
    material = run_dkg(["a", "b", "c", "d"], 3, random.Random(6))
    sig = aggregate([sign_share(material, n, b"m") for n in "abc"], 3)
    gpk = material.group_public_key
    assert verify_aggregate(sig, gpk, b"m")
    flipped = AggregateSignature(sig.value ^ 1, sig.message_digest, sig.signer_set)
    assert not verify_aggregate(flipped, gpk, b"m")
    assert not verify_aggregate(sig, gpk, b"m'")
    assert not verify_aggregate(sig, 0, b"m")
    assert not verify_aggregate(None, gpk, b"m")
    assert sig.value == unique_signature(gpk, b"m")


def test_vrf_seed_shape():
    material = run_dkg(["a", "b", "c", "d"], 3, random.Random(7))
    s1 = aggregate([sign_share(material, n, b"1") for n in "abc"], 3)
    s2 = aggregate([sign_share(material, n, b"2") for n in "abc"], 3)
    assert derive_vrf_seed(s1) == derive_vrf_seed(s1)
    assert derive_vrf_seed(s1) != derive_vrf_seed(s2)
    assert len(derive_vrf_seed(s1)) == 32
