"""Desk-scale threshold cryptography.

Shamir sharing over a prime field, Joint-Feldman DKG, unique threshold
signatures in a prime-order subgroup of Z_P*, and VRF seeds hashed from
aggregate signatures.

None of this is secure: discrete logs in a 61-bit group are cheap, and the
hash-to-group map publishes the exponent of H(m), so anyone holding the
group public key can compute the unique signature directly. What the
protocol needs from the scheme is preserved: any t shares aggregate to the
same value, and that value is a deterministic function of (key, message).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Protocol, Sequence

from gmpy2 import powmod as _gmp_powmod


MERSENNE_61 = 2**61 - 1


def powmod(base: int, exponent: int, modulus: int) -> int:
    return int(_gmp_powmod(base, exponent, modulus))


class RandomSource(Protocol):
    def randrange(self, start: int, stop: int = ..., step: int = ...) -> int: ...


class DkgFailure(RuntimeError):
    """Too few qualified dealings survived the ritual."""


@dataclass(frozen=True)
class GroupParams:
    """Share field F_order and the order-`order` subgroup of Z_modulus*."""

    order: int
    modulus: int
    generator: int

    @classmethod
    def for_order(cls, order: int) -> GroupParams:
        # sympy is slow to import and only needed for non-default parameters
        from sympy import isprime

        if not isprime(order):
            raise ValueError(f"group order {order} is not prime")
        k = 2
        while not isprime(k * order + 1):
            k += 2
        modulus = k * order + 1
        for h in range(2, modulus):
            g = pow(h, k, modulus)
            if g != 1:
                return cls(order, modulus, g)
        raise ValueError("no generator found")  # unreachable for prime order

    @property
    def element_bytes(self) -> int:
        return (self.modulus.bit_length() + 7) // 8

    def encode(self, element: int) -> bytes:
        return element.to_bytes(self.element_bytes, "big")

    def is_element(self, value: object) -> bool:
        return (
            isinstance(value, int)
            and not isinstance(value, bool)
            and 0 < value < self.modulus
            and _in_subgroup(value, self)
        )

    def exp(self, exponent: int) -> int:
        return powmod(self.generator, exponent % self.order, self.modulus)

    def hash_to_exponent(self, message: bytes) -> int:
        return _hash_to_exponent(message, self.order)

    def hash_to_group(self, message: bytes) -> int:
        return _hash_to_group(message, self)


# Every replica checks the same few values, so the per-message work is cached.


@lru_cache(maxsize=4096)
def _in_subgroup(value: int, params: GroupParams) -> bool:
    return powmod(value, params.order, params.modulus) == 1


@lru_cache(maxsize=4096)
def _hash_to_exponent(message: bytes, order: int) -> int:
    digest = hashlib.sha256(b"unitychain/h2g/" + message).digest()
    return int.from_bytes(digest, "big") % order


@lru_cache(maxsize=4096)
def _hash_to_group(message: bytes, params: GroupParams) -> int:
    return params.exp(_hash_to_exponent(message, params.order))


# P = 52 * (2^61 - 1) + 1 is the smallest prime of that form; 2^52 generates
# the order-(2^61 - 1) subgroup.
DEFAULT_PARAMS = GroupParams(
    order=MERSENNE_61,
    modulus=52 * MERSENNE_61 + 1,
    generator=2**52,
)


@dataclass(frozen=True)
class SecretShare:
    holder: str
    index: int
    value: int


@dataclass(frozen=True)
class DealingCommitment:
    dealer: str
    coefficient_commitments: tuple[int, ...]


@dataclass(frozen=True)
class Dealing:
    """One dealer's contribution: a share per recipient plus commitments."""

    dealer: str
    commitment: DealingCommitment
    shares: Mapping[str, SecretShare]


@dataclass(frozen=True)
class GroupKeyMaterial:
    group_public_key: int
    threshold: int
    member_shares: Mapping[str, SecretShare]
    ritual_id: str
    public_shares: Mapping[str, int] = field(default_factory=dict)
    qualified: tuple[str, ...] = ()
    params: GroupParams = DEFAULT_PARAMS

    @property
    def members(self) -> tuple[str, ...]:
        return tuple(self.member_shares)


@dataclass(frozen=True)
class SignatureShare:
    signer: str
    index: int
    value: int
    message_digest: bytes


@dataclass(frozen=True)
class AggregateSignature:
    value: int
    message_digest: bytes
    signer_set: frozenset[str]


def message_digest(message: bytes) -> bytes:
    return hashlib.sha256(message).digest()


def evaluate_polynomial(coefficients: Sequence[int], x: int, modulus: int) -> int:
    acc = 0
    for c in reversed(coefficients):
        acc = (acc * x + c) % modulus
    return acc


def commit(coefficients: Sequence[int], dealer: str, params: GroupParams = DEFAULT_PARAMS) -> DealingCommitment:
    return DealingCommitment(dealer, tuple(params.exp(a) for a in coefficients))


def committed_value(commitment: DealingCommitment, index: int, params: GroupParams = DEFAULT_PARAMS) -> int:
    """g^f(index) computed from the coefficient commitments (Horner in the exponent)."""
    p = params.modulus
    acc = 1
    for c in reversed(commitment.coefficient_commitments):
        acc = _gmp_powmod(acc, index, p) * c % p
    return int(acc)


def verify_share(share: SecretShare, commitment: DealingCommitment, params: GroupParams = DEFAULT_PARAMS) -> bool:
    return params.exp(share.value) == committed_value(commitment, share.index, params)


def shamir_split(
    secret: int,
    n: int,
    t: int,
    rng: RandomSource,
    params: GroupParams = DEFAULT_PARAMS,
    holders: Sequence[str] | None = None,
    dealer: str = "dealer",
) -> tuple[list[SecretShare], DealingCommitment]:
    """Split `secret` into n shares at x = 1..n, any t of which reconstruct it."""
    if not 1 <= t <= n:
        raise ValueError(f"threshold must satisfy 1 <= t <= n, got t={t}, n={n}")
    if holders is None:
        holders = [str(i) for i in range(1, n + 1)]
    if len(holders) != n:
        raise ValueError("need exactly one holder per share")
    q = params.order
    coefficients = [secret % q] + [rng.randrange(q) for _ in range(t - 1)]
    shares = [
        SecretShare(holder, i, evaluate_polynomial(coefficients, i, q))
        for i, holder in enumerate(holders, start=1)
    ]
    return shares, commit(coefficients, dealer, params)


def lagrange_at_zero(indices: Sequence[int], modulus: int) -> dict[int, int]:
    coefficients = {}
    for i in indices:
        num, den = 1, 1
        for j in indices:
            if j != i:
                num = num * j % modulus
                den = den * (j - i) % modulus
        coefficients[i] = num * pow(den, -1, modulus) % modulus
    return coefficients


def _check_indices(indices: Sequence[int], t: int) -> None:
    if len(set(indices)) != len(indices):
        raise ValueError("duplicate share indices")
    if len(indices) < t:
        raise ValueError(f"need at least {t} shares, got {len(indices)}")


def shamir_reconstruct(shares: Sequence[SecretShare], t: int, params: GroupParams = DEFAULT_PARAMS) -> int:
    indices = [s.index for s in shares]
    _check_indices(indices, t)
    q = params.order
    lam = lagrange_at_zero(indices, q)
    return sum(lam[s.index] * s.value for s in shares) % q


def deal(
    dealer: str,
    participants: Sequence[str],
    t: int,
    rng: RandomSource,
    params: GroupParams = DEFAULT_PARAMS,
) -> Dealing:
    secret = rng.randrange(params.order)
    shares, commitment = shamir_split(secret, len(participants), t, rng, params, participants, dealer)
    return Dealing(dealer, commitment, {s.holder: s for s in shares})


def complaints_against(dealings: Iterable[Dealing], params: GroupParams = DEFAULT_PARAMS) -> dict[str, list[str]]:
    """Map dealer -> recipients whose share failed the commitment check."""
    out: dict[str, list[str]] = {}
    for d in dealings:
        bad = [r for r, s in d.shares.items() if not verify_share(s, d.commitment, params)]
        if bad:
            out[d.dealer] = bad
    return out


def finish_dkg(
    dealings: Sequence[Dealing],
    participants: Sequence[str],
    t: int,
    params: GroupParams = DEFAULT_PARAMS,
    ritual_id: str = "dkg",
) -> GroupKeyMaterial:
    """Discard dealings with complaints, then sum the survivors."""
    if len(participants) < t:
        raise DkgFailure(f"{len(participants)} participants cannot meet threshold {t}")
    complaints = complaints_against(dealings, params)
    qualified = [d for d in dealings if d.dealer not in complaints and len(d.commitment.coefficient_commitments) == t]
    if len(qualified) < t:
        raise DkgFailure(f"only {len(qualified)} qualified dealings, threshold {t}")
    q, p = params.order, params.modulus
    member_shares = {}
    for i, name in enumerate(participants, start=1):
        member_shares[name] = SecretShare(name, i, sum(d.shares[name].value for d in qualified) % q)
    gpk = 1
    for d in qualified:
        gpk = gpk * d.commitment.coefficient_commitments[0] % p
    public_shares = {name: combined_public_share(qualified, i, params) for i, name in enumerate(participants, start=1)}
    return GroupKeyMaterial(
        group_public_key=gpk,
        threshold=t,
        member_shares=member_shares,
        ritual_id=ritual_id,
        public_shares=public_shares,
        qualified=tuple(d.dealer for d in qualified),
        params=params,
    )


def combined_public_share(dealings: Iterable[Dealing], index: int, params: GroupParams = DEFAULT_PARAMS) -> int:
    p = params.modulus
    acc = 1
    for d in dealings:
        acc = acc * committed_value(d.commitment, index, params) % p
    return acc


def run_dkg(
    participants: Sequence[str],
    t: int,
    rng: RandomSource,
    params: GroupParams = DEFAULT_PARAMS,
    ritual_id: str = "dkg",
) -> GroupKeyMaterial:
    """Joint-Feldman DKG where every participant deals once."""
    if len(participants) < t:
        raise DkgFailure(f"{len(participants)} participants cannot meet threshold {t}")
    dealings = [deal(name, participants, t, rng, params) for name in participants]
    return finish_dkg(dealings, participants, t, params, ritual_id)


def sign_with_share(share: SecretShare, message: bytes, params: GroupParams = DEFAULT_PARAMS) -> SignatureShare:
    h = params.hash_to_group(message)
    return SignatureShare(share.holder, share.index, powmod(h, share.value, params.modulus), message_digest(message))


def sign_share(material: GroupKeyMaterial, signer: str, message: bytes) -> SignatureShare:
    try:
        share = material.member_shares[signer]
    except KeyError:
        raise KeyError(f"{signer} holds no share in ritual {material.ritual_id}") from None
    return sign_with_share(share, message, material.params)


def verify_signature_share(
    share: SignatureShare, public_share: int, message: bytes, params: GroupParams = DEFAULT_PARAMS
) -> bool:
    # H(m)^s_i == (g^s_i)^h(m) because H(m) = g^h(m)
    if share.message_digest != message_digest(message):
        return False
    return share.value == powmod(public_share, params.hash_to_exponent(message), params.modulus)


def aggregate(shares: Sequence[SignatureShare], t: int, params: GroupParams = DEFAULT_PARAMS) -> AggregateSignature:
    if not shares:
        raise ValueError(f"need at least {t} shares, got 0")
    digests = {s.message_digest for s in shares}
    if len(digests) != 1:
        raise ValueError("signature shares cover different messages")
    _check_indices([s.index for s in shares], t)
    p = params.modulus
    lam = lagrange_at_zero([s.index for s in shares], params.order)
    value = 1
    for s in sorted(shares, key=lambda s: s.index):
        value = value * _gmp_powmod(s.value, lam[s.index], p) % p
    return AggregateSignature(int(value), digests.pop(), frozenset(s.signer for s in shares))


@lru_cache(maxsize=4096)
def unique_signature(group_public_key: int, message: bytes, params: GroupParams = DEFAULT_PARAMS) -> int:
    return powmod(group_public_key, params.hash_to_exponent(message), params.modulus)


def verify_aggregate(
    sig: AggregateSignature | None,
    group_public_key: int | None,
    message: bytes,
    params: GroupParams = DEFAULT_PARAMS,
) -> bool:
    if sig is None or not params.is_element(group_public_key):
        return False
    if sig.message_digest != message_digest(message):
        return False
    return sig.value == unique_signature(group_public_key, message, params)


def derive_vrf_seed(sig: AggregateSignature, params: GroupParams = DEFAULT_PARAMS) -> bytes:
    return hashlib.sha256(b"unitychain/vrf/" + params.encode(sig.value)).digest()


def combine_seeds(*seeds: bytes) -> bytes:
    h = hashlib.sha256(b"unitychain/seed-combine/")
    for s in seeds:
        h.update(s)
    return h.digest()
