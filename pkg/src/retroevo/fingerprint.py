"""Morgan-style circular fingerprints and Tanimoto similarity.

Atom identifiers are 64-bit BLAKE2b digests so the bits do not depend on
Python's per-process string hashing.  An atom starts from the hash of
(atomic number, heavy degree, hydrogen count, charge, aromatic flag, ring
flag); each round hashes the previous identifier together with the sorted
(bond order, neighbour identifier) pairs.  Every identifier seen at radius
0..r sets bit ``id % nbits``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

from .molgraph import ATOMIC_NUMBER, Molecule

DEFAULT_RADIUS = 2
DEFAULT_NBITS = 2048


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class BitFingerprint:
    bits: int
    nbits: int
    radius: int = DEFAULT_RADIUS

    def __post_init__(self):
        if self.nbits <= 0:
            raise ValueError("fingerprint length must be positive")
        if self.bits < 0 or self.bits >> self.nbits:
            raise ValueError("bits outside fingerprint length")

    def popcount(self) -> int:
        return self.bits.bit_count()

    def on_bits(self) -> list[int]:
        out, b, i = [], self.bits, 0
        while b:
            if b & 1:
                out.append(i)
            b >>= 1
            i += 1
        return out

    def to_hex(self) -> str:
        return format(self.bits, "x")

    def __len__(self):
        return self.nbits


def _digest(values: Sequence[int]) -> int:
    data = struct.pack(f"<{len(values)}q", *values)
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little") >> 1


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def atom_environments(m: Molecule, radius: int) -> list[set[int]]:
    """Identifiers per radius: element ``k`` holds every radius-k environment id."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    ring = m.ring_atoms
    ids = [
        _digest((ATOMIC_NUMBER.get(a.element, 0), m.degree(i), a.hydrogens, a.charge,
                 int(a.aromatic), int(i in ring)))
        for i, a in enumerate(m.atoms)
    ]
    levels = [set(ids)]
    adj = m.adjacency
    for r in range(1, radius + 1):
        new = []
        for i, nbrs in enumerate(adj):
            key = [r, ids[i]]
            for o, ident in sorted((o, ids[j]) for j, o in nbrs):
                key += (o, ident)
            new.append(_digest(key))
        ids = new
        levels.append(set(ids))
    return levels


def morgan_fingerprint(m: Molecule, radius: int = DEFAULT_RADIUS,
                       nbits: int = DEFAULT_NBITS) -> BitFingerprint:
    if not _is_power_of_two(nbits):
        raise ValueError("nbits must be a power of two")
    bits = 0
    for level in atom_environments(m, radius):
        for ident in level:
            bits |= 1 << (ident & (nbits - 1))
    return BitFingerprint(bits, nbits, radius)


def tanimoto(a: BitFingerprint, b: BitFingerprint) -> float:
    """|a & b| / |a | b|, with two empty fingerprints counting as identical (1.0)."""
    if a.nbits != b.nbits:
        raise LengthMismatch(f"fingerprint lengths differ: {a.nbits} vs {b.nbits}")
    union = (a.bits | b.bits).bit_count()
    if union == 0:
        return 1.0
    return (a.bits & b.bits).bit_count() / union


def reaction_fingerprint(reactants: Iterable[Molecule], product: Molecule,
                         radius: int = DEFAULT_RADIUS, nbits: int = DEFAULT_NBITS) -> BitFingerprint:
    """Product bits in the low half, OR of reactant bits in the high half."""
    reactants = list(reactants)
    if not reactants:
        raise ValueError("reaction needs at least one reactant")
    low = morgan_fingerprint(product, radius, nbits).bits
    high = 0
    for r in reactants:
        high |= morgan_fingerprint(r, radius, nbits).bits
    return BitFingerprint(low | (high << nbits), 2 * nbits, radius)


def rank_by_similarity(query: BitFingerprint, fps: Sequence[BitFingerprint]) -> list[tuple[int, float]]:
    """(index, similarity) pairs, most similar first; ties keep insertion order."""
    sims = [(i, tanimoto(query, fp)) for i, fp in enumerate(fps)]
    sims.sort(key=lambda t: -t[1])
    return sims
