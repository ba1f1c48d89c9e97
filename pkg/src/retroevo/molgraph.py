"""Molecular graphs parsed from a SMILES subset, with canonical SMILES output.

The grammar (see ``docs/smiles.md``) covers the organic subset
``B C N O P S F Cl Br I``, their aromatic lowercase forms, bracket atoms with
isotope / chirality / hydrogen count / charge / atom class, the bond symbols
``- = # : / \\``, branches and ring closures (``1``..``9``, ``%nn``).

Aromaticity is taken from the input as written; no kekulization is attempted,
so ``c1ccccc1`` and ``C1=CC=CC=C1`` are different molecules here.
"""

from __future__ import annotations


import heapq
import random
from collections import Counter
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Sequence

SINGLE, DOUBLE, TRIPLE, AROMATIC = 1, 2, 3, 4

ORGANIC_SUBSET = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_SUBSET = ("b", "c", "n", "o", "p", "s")
_AROMATIC_BRACKET = ("se", "as") + AROMATIC_SUBSET

# lowest valence first; the implicit-H rule picks the smallest one that fits
VALENCES: dict[str, tuple[int, ...]] = {
    "H": (1,),
    "B": (3,),
    "C": (4,),
    "N": (3, 5),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1, 3, 5),
}

ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni "
    "Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I "
    "Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt "
    "Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr "
    "Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og"
).split()
ATOMIC_NUMBER = {sym: z for z, sym in enumerate(ELEMENTS, start=1)}

_BOND_SYMBOLS = {"-": SINGLE, "=": DOUBLE, "#": TRIPLE, ":": AROMATIC, "/": SINGLE, "\\": SINGLE}
_BOND_VALENCE = {SINGLE: 1, DOUBLE: 2, TRIPLE: 3, AROMATIC: 1}
_FLIP = {"/": "\\", "\\": "/"}


class ParseError(ValueError):
    """Raised for malformed chemical text; ``position`` is a 0-based offset."""

    def __init__(self, message: str, position: int | None = None, text: str | None = None):
        self.position = position
        self.text = text
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"{message}{where}" + (f" in {text!r}" if text is not None else ""))


class SmilesSyntaxError(ParseError):
    pass


class UnbalancedParenthesis(SmilesSyntaxError):
    pass


class UnclosedRingBond(SmilesSyntaxError):
    pass


class UnknownElement(SmilesSyntaxError):
    pass


class ValenceViolation(ParseError):
    pass


@dataclass(frozen=True)
class Atom:
    element: str
    aromatic: bool = False
    charge: int = 0
    hydrogens: int = 0
    isotope: int | None = None
    chirality: str | None = None
    # neighbour indices in SMILES order, -1 standing for the implicit hydrogen
    chiral_order: tuple[int, ...] | None = None
    map_num: int = 0

    @property
    def symbol(self) -> str:
        return self.element.lower() if self.aromatic else self.element


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: int = SINGLE


@dataclass(frozen=True)
class DoubleBondStereo:
    """Cis/trans relation of substituent ``x`` on ``a`` and ``y`` on ``b`` across ``a=b``."""

    a: int
    b: int
    x: int
    y: int
    cis: bool


ElementCounts = dict


def valence_shift(element: str, charge: int) -> int:
    """Change in usable valence caused by a formal charge."""
    if not charge:
        return 0
    if element == "C":
        return -abs(charge)
    if element == "B":
        return -charge
    return charge


def allowed_valences(element: str, charge: int = 0) -> tuple[int, ...] | None:
    base = VALENCES.get(element)
    if base is None:
        return None
    shift = valence_shift(element, charge)
    return tuple(v + shift for v in base if v + shift >= 0)


def implicit_hydrogens(element: str, aromatic: bool, bond_valence: int) -> int | None:
    """Hydrogens a bare organic-subset atom carries; None if no valence fits."""
    vals = VALENCES[element]
    if aromatic:
        if bond_valence > vals[-1]:
            return None
        return max(0, vals[0] - bond_valence - 1)
    for v in vals:
        if v >= bond_valence:
            return v - bond_valence
    return None


@dataclass(frozen=True, eq=False)
class Molecule:
    """Immutable attributed molecular graph.

    Equality and hashing go through the canonical SMILES, so two molecules
    compare equal exactly when their labelled graphs are isomorphic.
    """

    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    stereo_bonds: tuple[DoubleBondStereo, ...] = ()

    def __post_init__(self):
        n = len(self.atoms)
        seen = set()
        for b in self.bonds:
            if not (0 <= b.begin < n and 0 <= b.end < n):
                raise ValueError(f"bond {b} references a missing atom")
            if b.begin == b.end:
                raise ValueError(f"self-loop on atom {b.begin}")
            key = (b.begin, b.end) if b.begin < b.end else (b.end, b.begin)
            if key in seen:
                raise ValueError(f"duplicate bond between atoms {key}")
            seen.add(key)

    def __eq__(self, other):
        if not isinstance(other, Molecule):
            return NotImplemented
        return self.canonical_smiles == other.canonical_smiles

    def __hash__(self):
        return hash(self.canonical_smiles)

    def __repr__(self):
        return f"Molecule({self.canonical_smiles!r})"

    def __len__(self):
        return len(self.atoms)

    @cached_property
    def adjacency(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for b in self.bonds:
            adj[b.begin].append((b.end, b.order))
            adj[b.end].append((b.begin, b.order))
        return tuple(tuple(a) for a in adj)

    @cached_property
    def _bond_index(self) -> dict[tuple[int, int], int]:
        idx = {}
        for k, b in enumerate(self.bonds):
            idx[(b.begin, b.end)] = k
            idx[(b.end, b.begin)] = k
        return idx

    def bond_between(self, i: int, j: int) -> Bond | None:
        k = self._bond_index.get((i, j))
        return None if k is None else self.bonds[k]

    def neighbors(self, i: int) -> list[int]:
        return [j for j, _ in self.adjacency[i]]

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])

    def bond_valence(self, i: int) -> int:
        return sum(_BOND_VALENCE[o] for _, o in self.adjacency[i])

    @cached_property
    def ring_bonds(self) -> frozenset[tuple[int, int]]:
        """Bonds lying on at least one cycle (i.e. not bridges), as sorted pairs."""
        n = len(self.atoms)
        disc = [-1] * n
        low = [0] * n
        bridges = set()
        t = 0
        for root in range(n):
            if disc[root] != -1:
                continue
            disc[root] = low[root] = t
            t += 1
            stack = [(root, -1, iter(self.adjacency[root]))]
            while stack:
                u, parent, it = stack[-1]
                advanced = False
                for v, _ in it:
                    if v == parent:
                        continue
                    if disc[v] == -1:
                        disc[v] = low[v] = t
                        t += 1
                        stack.append((v, u, iter(self.adjacency[v])))
                        advanced = True
                        break
                    low[u] = min(low[u], disc[v])
                if not advanced:
                    stack.pop()
                    if stack:
                        p = stack[-1][0]
                        low[p] = min(low[p], low[u])
                        if low[u] > disc[p]:
                            bridges.add((min(p, u), max(p, u)))
        return frozenset(
            (min(b.begin, b.end), max(b.begin, b.end))
            for b in self.bonds
            if (min(b.begin, b.end), max(b.begin, b.end)) not in bridges
        )

    @cached_property
    def ring_atoms(self) -> frozenset[int]:
        return frozenset(i for pair in self.ring_bonds for i in pair)

    def in_ring(self, i: int) -> bool:
        return i in self.ring_atoms

    def bond_in_ring(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self.ring_bonds

    @cached_property
    def components(self) -> tuple[tuple[int, ...], ...]:
        seen = [False] * len(self.atoms)
        comps = []
        for s in range(len(self.atoms)):
            if seen[s]:
                continue
            seen[s] = True
            comp, stack = [], [s]
            while stack:
                u = stack.pop()
                comp.append(u)
                for v, _ in self.adjacency[u]:
                    if not seen[v]:
                        seen[v] = True
                        stack.append(v)
            comps.append(tuple(sorted(comp)))
        return tuple(comps)

    @property
    def ring_count(self) -> int:
        """Cyclomatic number, equal to the size of the smallest set of smallest rings."""
        return len(self.bonds) - len(self.atoms) + len(self.components)

    @property
    def heavy_atom_count(self) -> int:
        return sum(1 for a in self.atoms if a.element != "H")

    @property
    def stereocenter_count(self) -> int:
        return sum(1 for i in _canonical_state(self).chiral)

    @cached_property
    def canonical_smiles(self) -> str:
        return _canonical_state(self).text

    def fragments(self) -> list[Molecule]:
        """Split into connected components, each as its own Molecule."""
        if len(self.components) <= 1:
            return [self]
        return [self.subgraph(c) for c in self.components]

    def subgraph(self, keep: Sequence[int]) -> Molecule:
        remap = {old: new for new, old in enumerate(keep)}
        atoms = []
        for old in keep:
            a = self.atoms[old]
            if a.chiral_order is not None:
                order = tuple(-1 if j == -1 else remap.get(j, -2) for j in a.chiral_order)
                a = replace(a, chiral_order=order) if -2 not in order else replace(a, chirality=None, chiral_order=None)
            atoms.append(a)
        bonds = [
            Bond(remap[b.begin], remap[b.end], b.order)
            for b in self.bonds
            if b.begin in remap and b.end in remap
        ]
        stereo = [
            DoubleBondStereo(remap[s.a], remap[s.b], remap[s.x], remap[s.y], s.cis)
            for s in self.stereo_bonds
            if all(k in remap for k in (s.a, s.b, s.x, s.y))
        ]
        return Molecule(tuple(atoms), tuple(bonds), tuple(stereo))

    def relabel(self, perm: Sequence[int]) -> Molecule:
        """Return the same molecule with atom ``i`` moved to index ``perm[i]``."""
        inv = [0] * len(perm)
        for old, new in enumerate(perm):
            inv[new] = old
        atoms = []
        for new in range(len(perm)):
            a = self.atoms[inv[new]]
            if a.chiral_order is not None:
                a = replace(a, chiral_order=tuple(-1 if j == -1 else perm[j] for j in a.chiral_order))
            atoms.append(a)
        bonds = tuple(Bond(perm[b.begin], perm[b.end], b.order) for b in self.bonds)
        stereo = tuple(
            DoubleBondStereo(perm[s.a], perm[s.b], perm[s.x], perm[s.y], s.cis) for s in self.stereo_bonds
        )
        return Molecule(tuple(atoms), bonds, stereo)

    def check_valence(self) -> None:
        """Raise ValenceViolation if any atom exceeds its largest allowed valence."""
        for i, a in enumerate(self.atoms):
            vals = allowed_valences(a.element, a.charge)
            if vals is None:
                continue
            used = self.bond_valence(i) + a.hydrogens
            if not vals or used > vals[-1]:
                raise ValenceViolation(f"atom {i} ({a.symbol}) has valence {used}", i)


# --------------------------------------------------------------------------
# parsing


class _Parser:
    def __init__(self, text: str):
        self.s = text
        self.atoms: list[dict] = []
        self.bonds: dict[tuple[int, int], list] = {}  # key -> [order, dirchar, dir_from]
        self.order: list[list] = []

    def error(self, cls, msg, pos):
        raise cls(msg, pos, self.s)

    def parse(self) -> Molecule:
        s = self.s
        if not s:
            raise SmilesSyntaxError("empty SMILES", 0, s)
        n = len(s)
        i = 0
        prev: int | None = None
        stack: list[tuple[int, int, int]] = []  # (atom, atoms-at-open, pos)
        pending: tuple[str, int] | None = None
        rings: dict[int, tuple[int, tuple[str, int] | None, int, int]] = {}
        while i < n:
            ch = s[i]
            if ch == "(":
                if prev is None:
                    self.error(SmilesSyntaxError, "branch without a preceding atom", i)
                if pending is not None:
                    self.error(SmilesSyntaxError, "bond symbol before branch", pending[1])
                stack.append((prev, len(self.atoms), i))
                i += 1
            elif ch == ")":
                if not stack:
                    self.error(UnbalancedParenthesis, "unmatched ')'", i)
                if pending is not None:
                    self.error(SmilesSyntaxError, "dangling bond symbol", pending[1])
                start_atom, count, _ = stack.pop()
                if len(self.atoms) == count:
                    self.error(SmilesSyntaxError, "empty branch", i)
                prev = start_atom
                i += 1
            elif ch in _BOND_SYMBOLS:
                if prev is None:
                    self.error(SmilesSyntaxError, "bond symbol without a preceding atom", i)
                if pending is not None:
                    self.error(SmilesSyntaxError, "two consecutive bond symbols", i)
                pending = (ch, i)
                i += 1
            elif ch == ".":
                if prev is None or pending is not None:
                    self.error(SmilesSyntaxError, "misplaced '.'", i)
                if stack:
                    self.error(SmilesSyntaxError, "'.' inside a branch", i)
                prev = None
                i += 1
            elif ch.isdigit() or ch == "%":
                if prev is None:
                    self.error(SmilesSyntaxError, "ring closure without a preceding atom", i)
                start = i
                if ch == "%":
                    if len(s[i + 1 : i + 3]) != 2 or not s[i + 1 : i + 3].isdigit():
                        self.error(SmilesSyntaxError, "'%' must be followed by two digits", i)
                    num = int(s[i + 1 : i + 3])
                    i += 3
                else:
                    num = int(ch)
                    i += 1
                if num in rings:
                    partner, bond, _, slot = rings.pop(num)
                    if partner == prev:
                        self.error(SmilesSyntaxError, "ring closure onto the same atom", start)
                    order, dirchar, dir_from = self._ring_bond(partner, prev, bond, pending, start)
                    self._add_bond(partner, prev, order, dirchar, dir_from, start)
                    self.order[partner][slot] = prev
                    self.order[prev].append(partner)
                else:
                    rings[num] = (prev, pending, start, len(self.order[prev]))
                    self.order[prev].append(None)
                pending = None
            elif ch == "[":
                i = self._bracket_atom(i)
                prev, pending = self._attach(prev, pending)
            else:
                sym = None
                for cand in ORGANIC_SUBSET + AROMATIC_SUBSET:
                    if s.startswith(cand, i):
                        sym = cand
                        break
                if sym is None:
                    if ch.isalpha():
                        self.error(UnknownElement, f"unknown element {ch!r}", i)
                    self.error(SmilesSyntaxError, f"unexpected character {ch!r}", i)
                aromatic = sym.islower()
                self.atoms.append(
                    dict(element=sym.capitalize(), aromatic=aromatic, charge=0, h=None,
                         isotope=None, chirality=None, map_num=0, pos=i)
                )
                self.order.append([])
                i += len(sym)
                prev, pending = self._attach(prev, pending)
        if stack:
            self.error(UnbalancedParenthesis, "unclosed '('", n)
        if rings:
            num, (_, _, pos, _) = min(rings.items(), key=lambda kv: kv[1][2])
            self.error(UnclosedRingBond, f"ring bond {num} never closed", pos)
        if pending is not None:
            self.error(SmilesSyntaxError, "dangling bond symbol", pending[1])
        return self._build()

    def _attach(self, prev, pending):
        idx = len(self.atoms) - 1
        if prev is not None:
            if pending is not None:
                ch = pending[0]
                order = _BOND_SYMBOLS[ch]
                dirchar = ch if ch in _FLIP else None
            else:
                both = self.atoms[prev]["aromatic"] and self.atoms[idx]["aromatic"]
                order = AROMATIC if both else SINGLE
                dirchar = None
            self._add_bond(prev, idx, order, dirchar, prev, self.atoms[idx]["pos"])
            self.order[prev].append(idx)
            self.order[idx].append(prev)
        a = self.atoms[idx]
        if a["chirality"] and a["h"]:
            self.order[idx].append(-1)
        return idx, None

    def _ring_bond(self, opener, closer, b_open, b_close, pos):
        sym_open = b_open[0] if b_open else None
        sym_close = b_close[0] if b_close else None
        o_open = _BOND_SYMBOLS[sym_open] if sym_open else None
        o_close = _BOND_SYMBOLS[sym_close] if sym_close else None
        if o_open is not None and o_close is not None and o_open != o_close:
            self.error(SmilesSyntaxError, "conflicting ring-closure bond symbols", pos)
        order = o_open or o_close
        if order is None:
            both = self.atoms[opener]["aromatic"] and self.atoms[closer]["aromatic"]
            order = AROMATIC if both else SINGLE
        if sym_open in _FLIP:
            return order, sym_open, opener
        if sym_close in _FLIP:
            return order, sym_close, closer
        return order, None, None

    def _add_bond(self, a, b, order, dirchar, dir_from, pos):
        key = (a, b) if a < b else (b, a)
        if key in self.bonds:
            self.error(SmilesSyntaxError, "duplicate bond between the same atoms", pos)
        self.bonds[key] = [order, dirchar, dir_from]

    def _bracket_atom(self, i: int) -> int:
        s = self.s
        start = i
        i += 1
        j = i
        while j < len(s) and s[j].isdigit():
            j += 1
        isotope = int(s[i:j]) if j > i else None
        i = j
        sym = None
        for cand in _AROMATIC_BRACKET:
            if s.startswith(cand, i):
                sym = cand
                break
        if sym is None:
            if i < len(s) and s[i].isupper():
                two = s[i : i + 2]
                if len(two) == 2 and two[1].islower() and two in ATOMIC_NUMBER:
                    sym = two
                elif s[i] in ATOMIC_NUMBER:
                    sym = s[i]
            if sym is None:
                if i < len(s) and s[i].isalpha():
                    self.error(UnknownElement, f"unknown element in bracket atom", i)
                self.error(SmilesSyntaxError, "bracket atom without element symbol", i)
        aromatic = sym.islower()
        element = sym.capitalize()
        i += len(sym)
        chirality = None
        if s.startswith("@@", i):
            chirality, i = "@@", i + 2
        elif s.startswith("@", i):
            chirality, i = "@", i + 1
        if chirality and i < len(s) and s[i].isalpha() and s[i] != "H":
            self.error(SmilesSyntaxError, "unsupported chirality class", i)
        h = 0
        if i < len(s) and s[i] == "H":
            i += 1
            j = i
            while j < len(s) and s[j].isdigit():
                j += 1
            h = int(s[i:j]) if j > i else 1
            i = j
        charge = 0
        if i < len(s) and s[i] in "+-":
            sign = 1 if s[i] == "+" else -1
            c = s[i]
            i += 1
            j = i
            while j < len(s) and s[j].isdigit():
                j += 1
            if j > i:
                charge = sign * int(s[i:j])
                i = j
            else:
                charge = sign
                while i < len(s) and s[i] == c:
                    charge += sign
                    i += 1
        map_num = 0
        if i < len(s) and s[i] == ":":
            i += 1
            j = i
            while j < len(s) and s[j].isdigit():
                j += 1
            if j == i:
                self.error(SmilesSyntaxError, "atom class without digits", i)
            map_num = int(s[i:j])
            i = j
        if i >= len(s) or s[i] != "]":
            self.error(SmilesSyntaxError, "expected ']'", i)
        self.atoms.append(
            dict(element=element, aromatic=aromatic, charge=charge, h=h, isotope=isotope,
                 chirality=chirality, map_num=map_num, pos=start)
        )
        self.order.append([])
        return i + 1

    def _build(self) -> Molecule:
        n = len(self.atoms)
        valence = [0] * n
        for (a, b), (order, _, _) in self.bonds.items():
            valence[a] += _BOND_VALENCE[order]
            valence[b] += _BOND_VALENCE[order]
        hydrogens = []
        for i, a in enumerate(self.atoms):
            if a["h"] is None:
                h = implicit_hydrogens(a["element"], a["aromatic"], valence[i])
                if h is None:
                    self.error(ValenceViolation, f"valence exceeded on {a['element']}", a["pos"])
            else:
                h = a["h"]
                vals = allowed_valences(a["element"], a["charge"])
                if vals is not None and (not vals or valence[i] + h > vals[-1]):
                    self.error(ValenceViolation, f"valence exceeded on {a['element']}", a["pos"])
            hydrogens.append(h)

        adjacency: list[list[int]] = [[] for _ in range(n)]
        for a, b in self.bonds:
            adjacency[a].append(b)
            adjacency[b].append(a)

        stereo = self._double_bond_stereo(adjacency)

        # fold plain explicit hydrogens into their heavy neighbour
        removed: set[int] = set()
        for i, a in enumerate(self.atoms):
            if (a["element"] == "H" and a["charge"] == 0 and a["isotope"] is None and not a["map_num"]
                    and a["chirality"] is None and len(adjacency[i]) == 1 and hydrogens[i] == 0):
                j = adjacency[i][0]
                if self.atoms[j]["element"] == "H" or j in removed:
                    continue
                removed.add(i)
                hydrogens[j] += 1
                if self.order[j] and i in self.order[j]:
                    self.order[j] = [-1 if k == i else k for k in self.order[j]]
        if removed:
            kept_stereo = []
            for st in stereo:
                a_, b_, x, y, cis = st
                if x in removed:
                    alt = [k for k in adjacency[a_] if k != b_ and k != x and k not in removed]
                    if not alt:
                        continue
                    x, cis = alt[0], not cis
                if y in removed:
                    alt = [k for k in adjacency[b_] if k != a_ and k != y and k not in removed]
                    if not alt:
                        continue
                    y, cis = alt[0], not cis
                kept_stereo.append((a_, b_, x, y, cis))
            stereo = kept_stereo

        keep = [i for i in range(n) if i not in removed]
        remap = {old: new for new, old in enumerate(keep)}
        atoms = []
        for old in keep:
            a = self.atoms[old]
            chir, order = a["chirality"], None
            if chir is not None:
                order = tuple(-1 if k == -1 else remap[k] for k in self.order[old])
                if len(order) < 3 or order.count(-1) > 1:
                    chir, order = None, None
            atoms.append(Atom(a["element"], a["aromatic"], a["charge"], hydrogens[old],
                              a["isotope"], chir, order, a["map_num"]))
        bonds = tuple(
            Bond(remap[a], remap[b], v[0]) for (a, b), v in self.bonds.items()
            if a in remap and b in remap
        )
        stereo_t = tuple(DoubleBondStereo(remap[a], remap[b], remap[x], remap[y], cis)
                         for a, b, x, y, cis in stereo)
        return Molecule(tuple(atoms), bonds, stereo_t)

    def _double_bond_stereo(self, adjacency):
        out = []
        for (a, b), (order, _, _) in self.bonds.items():
            if order != DOUBLE:
                continue
            side_a = self._outward_mark(a, b, adjacency)
            side_b = self._outward_mark(b, a, adjacency)
            if side_a and side_b:
                (x, ca), (y, cb) = side_a, side_b
                out.append((a, b, x, y, ca == cb))
        return out

    def _outward_mark(self, atom, partner, adjacency):
        for k in adjacency[atom]:
            if k == partner:
                continue
            key = (atom, k) if atom < k else (k, atom)
            _, dirchar, dir_from = self.bonds[key]
            if dirchar:
                return k, dirchar if dir_from == atom else _FLIP[dirchar]
        return None


def parse_smiles(text: str) -> Molecule:
    """Parse a SMILES string into a Molecule.

    Raises a ParseError subclass naming the offending 0-based position:
    UnbalancedParenthesis, UnclosedRingBond, UnknownElement, ValenceViolation
    or SmilesSyntaxError for any other grammar fault.
    """
    if not isinstance(text, str):
        raise TypeError("SMILES must be a string")
    return _Parser(text.strip()).parse()


# --------------------------------------------------------------------------
# canonical ranking


@dataclass
class _CanonState:
    ranks: list[int]
    chiral: frozenset[int]
    stereo: tuple[DoubleBondStereo, ...]
    text: str = ""


def _dense(keys: list) -> list[int]:
    lookup = {k: r for r, k in enumerate(sorted(set(keys)))}
    return [lookup[k] for k in keys]


_MASK = (1 << 64) - 1
_NBR_TABLE: list[int] = []
_TABLE_RNG = random.Random(0x5EED)


def _table(size: int) -> list[int]:
    while len(_NBR_TABLE) < size:
        _NBR_TABLE.append(_TABLE_RNG.getrandbits(62))
    return _NBR_TABLE


_ORDER_MULT = (0, 1, 0x9E3779B97F4A7C15, 0xC2B2AE3D27D4EB4F, 0x165667B19E3779F9)


def _edge_codes(adj) -> tuple[list[list[int]], tuple[int, ...]]:
    """Per-atom indices into the stacked per-order weight vector used by ``_refine``."""
    n = len(adj)
    orders = sorted({o for nb in adj for _, o in nb})
    slot = {o: k for k, o in enumerate(orders)}
    codes = [[slot[o] * n + j for j, o in nb] for nb in adj]
    return codes, tuple(orders)


def _refine(ranks: list[int], codes, orders, nclass: int | None = None) -> list[int]:
    """Refine ``ranks`` by neighbourhood until the number of classes is stable.

    A neighbourhood is summarised by a sum of random per-rank weights (scaled
    per bond order), which does not depend on neighbour order and hence not on
    atom numbering.  Returned ranks are dense.
    """
    n = len(ranks)
    table = _table(n + 1)
    if nclass is None:
        nclass = len(set(ranks))
    if nclass == n:
        return ranks
    while True:
        w = [table[r] for r in ranks]
        if len(orders) > 1 or orders[0] != SINGLE:
            stacked = []
            for o in orders:
                m = _ORDER_MULT[o]
                stacked.extend(w if m == 1 else [(x * m) & _MASK for x in w])
            w = stacked
        g = w.__getitem__
        keys = [(r << 64) | (sum(map(g, c)) & _MASK) for r, c in zip(ranks, codes)]
        uniq = sorted(set(keys))
        if len(uniq) == nclass:
            return ranks
        lookup = {k: r for r, k in enumerate(uniq)}
        ranks = [lookup[k] for k in keys]
        nclass = len(uniq)
        if nclass == n:
            return ranks


def _parity(src: Sequence[int], dst: Sequence[int]) -> int:
    pos = {v: k for k, v in enumerate(src)}
    perm = [pos[v] for v in dst]
    parity = 0
    for i in range(len(perm)):
        for j in range(i + 1, len(perm)):
            if perm[i] > perm[j]:
                parity ^= 1
    return parity


def _stereo_labels(mol: Molecule, ranks: list[int], pending: list[int] | None = None):
    labels = [0] * len(ranks)
    chiral = []
    for i, a in enumerate(mol.atoms):
        if a.chirality is None or a.chiral_order is None:
            continue
        order = a.chiral_order
        r = [-1 if k == -1 else ranks[k] for k in order]
        if len(set(r)) != len(r):
            if pending is not None:
                pending.append(i)
            continue
        by_rank = [k for _, k in sorted(zip(r, order))]
        labels[i] = 1 + (_parity(order, by_rank) ^ (a.chirality == "@@"))
        chiral.append(i)
    stereo = []
    for st in mol.stereo_bonds:
        refs = []
        ok = True
        for atom, partner, ref in ((st.a, st.b, st.x), (st.b, st.a, st.y)):
            subs = [k for k in mol.neighbors(atom) if k != partner]
            if len(subs) == 2 and ranks[subs[0]] == ranks[subs[1]]:
                ok = False
                break
            refs.append(max(subs, key=lambda k: ranks[k]))
        if not ok:
            continue
        cis = st.cis ^ (refs[0] != st.x) ^ (refs[1] != st.y)
        labels[st.a] += 3 + cis
        labels[st.b] += 3 + cis
        stereo.append(st)
    return labels, frozenset(chiral), tuple(stereo)


_STATE_CACHE_ATTR = "_canon_state"


_MAX_BRANCHES = 256


def _lowest_tied(ranks: list[int]) -> int | None:
    seen = set()
    tied = None
    for r in ranks:
        if r in seen and (tied is None or r < tied):
            tied = r
        seen.add(r)
    return tied


def _individualise(ranks: list[int], atom: int, codes, orders) -> list[int]:
    tied = ranks[atom]
    split = [r if r < tied else r + 1 for r in ranks]
    split[atom] = tied
    return _refine(split, codes, orders, len(set(ranks)) + 1)


def _with_stereo(mol: Molecule, ranks: list[int], codes, orders):
    """Fold stereo labels into ``ranks`` until stable; also report undecided centres."""
    for _ in range(4):
        pending: list[int] = []
        labels, chiral, stereo = _stereo_labels(mol, ranks, pending)
        before = len(set(ranks))
        new = _refine(_dense(list(zip(ranks, labels))), codes, orders)
        if len(set(new)) == before:
            return ranks, chiral, stereo, pending
        ranks = new
    pending = []
    labels, chiral, stereo = _stereo_labels(mol, ranks, pending)
    return ranks, chiral, stereo, pending


def _greedy(ranks: list[int], codes, orders) -> list[int]:
    n = len(ranks)
    while len(set(ranks)) < n:
        tied = _lowest_tied(ranks)
        ranks = _individualise(ranks, ranks.index(tied), codes, orders)
    return ranks


def _best_state(mol: Molecule, codes, orders) -> tuple[str, _CanonState, list[int]]:
    """Canonical state of ``mol`` with its stereo tags taken at face value.

    A tagged centre whose neighbours are still tied (e.g. the ring carbons of a
    1,4-disubstituted cyclohexane) only gets a parity once the tie is broken,
    and the parity depends on which atom is chosen.  Every choice is tried
    while such centres remain and the smallest resulting string wins.
    """
    inv = [
        (ATOMIC_NUMBER.get(a.element, 0), a.charge, len(mol.adjacency[i]), a.hydrogens, a.aromatic,
         a.isotope or 0, a.map_num, a.chirality is not None)
        for i, a in enumerate(mol.atoms)
    ]
    ranks = _refine(_dense(inv), codes, orders)
    has_stereo = bool(mol.stereo_bonds) or any(a.chirality for a in mol.atoms)
    if not has_stereo:
        ranks = _greedy(ranks, codes, orders)
        state = _CanonState(ranks, frozenset(), (), _write(mol, ranks, (), ()))
        return state.text, state, []
    ranks, chiral, stereo, pending = _with_stereo(mol, ranks, codes, orders)
    if not pending:
        ranks = _greedy(ranks, codes, orders)
        state = _CanonState(ranks, chiral, stereo, _write(mol, ranks, chiral, stereo))
        return state.text, state, []
    undecided = list(pending)
    best: tuple[str, _CanonState] | None = None
    stack = [ranks]
    leaves = 0
    while stack:
        ranks = stack.pop()
        ranks, chiral, stereo, pending = _with_stereo(mol, ranks, codes, orders)
        tied = _lowest_tied(ranks)
        if pending and tied is not None and leaves + len(stack) < _MAX_BRANCHES:
            members = [i for i, r in enumerate(ranks) if r == tied]
            stack.extend(_individualise(ranks, i, codes, orders) for i in reversed(members))
            continue
        ranks = _greedy(ranks, codes, orders)
        ranks, chiral, stereo, _ = _with_stereo(mol, ranks, codes, orders)
        leaves += 1
        text = _write(mol, ranks, chiral, stereo)
        if best is None or text < best[0]:
            best = (text, _CanonState(ranks, chiral, stereo, text))
    return best[0], best[1], undecided


def _without_tags(mol: Molecule, atoms: Iterable[int], flip: bool = False) -> Molecule:
    atoms = set(atoms)
    new = []
    for i, a in enumerate(mol.atoms):
        if i in atoms:
            if flip:
                a = replace(a, chirality="@" if a.chirality == "@@" else "@@")
            else:
                a = replace(a, chirality=None, chiral_order=None)
        new.append(a)
    return Molecule(tuple(new), mol.bonds, mol.stereo_bonds)


def _canonical_state(mol: Molecule) -> _CanonState:
    cached = mol.__dict__.get(_STATE_CACHE_ATTR)
    if cached is not None:
        return cached
    adj = mol.adjacency
    if not adj:
        state = _CanonState([], frozenset(), ())
        mol.__dict__[_STATE_CACHE_ATTR] = state
        return state
    codes, orders = _edge_codes(adj)
    if not orders:
        orders = (SINGLE,)
    text, state, undecided = _best_state(mol, codes, orders)
    # a tag on an undecided centre is kept only if inverting it gives a different molecule
    dropped = []
    for i in undecided:
        if _best_state(_without_tags(mol, [i], flip=True), codes, orders)[0] == text:
            dropped.append(i)
    if dropped:
        _, state, _ = _best_state(_without_tags(mol, dropped), codes, orders)
    mol.__dict__[_STATE_CACHE_ATTR] = state
    return state


# --------------------------------------------------------------------------
# writing


def _bracket(a: Atom, chir: str | None) -> str:
    parts = ["["]
    if a.isotope is not None:
        parts.append(str(a.isotope))
    parts.append(a.symbol)
    if chir:
        parts.append(chir)
    if a.hydrogens:
        parts.append("H" if a.hydrogens == 1 else f"H{a.hydrogens}")
    if a.charge:
        sign = "+" if a.charge > 0 else "-"
        parts.append(sign if abs(a.charge) == 1 else f"{sign}{abs(a.charge)}")
    if a.map_num:
        parts.append(f":{a.map_num}")
    parts.append("]")
    return "".join(parts)


_BARE = frozenset(ORGANIC_SUBSET + AROMATIC_SUBSET)


def _atom_tokens(mol: Molecule) -> list[str]:
    """Per-atom token ignoring chirality (bare where the subset rules allow)."""
    tokens = []
    adj = mol.adjacency
    for i, a in enumerate(mol.atoms):
        if a.charge == 0 and a.isotope is None and not a.map_num:
            sym = a.element.lower() if a.aromatic else a.element
            if sym in _BARE:
                bv = 0
                for _, o in adj[i]:
                    bv += _BOND_VALENCE[o]
                if implicit_hydrogens(a.element, a.aromatic, bv) == a.hydrogens:
                    tokens.append(sym)
                    continue
        tokens.append(_bracket(a, None))
    return tokens


def _digit_text(d: int) -> str:
    return str(d) if d < 10 else f"%{d:02d}"


def _write(mol: Molecule, ranks: Sequence[int], chiral: Iterable[int],
           stereo: Sequence[DoubleBondStereo]) -> str:
    n = len(mol.atoms)
    if n == 0:
        return ""
    atoms = mol.atoms
    chiral = set(chiral)
    rk = ranks.__getitem__
    by_rank = sorted(range(n), key=rk)
    # neighbour lists in rank order, built by visiting atoms in rank order
    madj = mol.adjacency
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for v in by_rank:
        for u, o in madj[v]:
            adj[u].append((v, o))
    pos = [-1] * n
    parent = [-1] * n
    children: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    closures: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    roots = []
    counter = 0

    for start in by_rank:
        if pos[start] != -1:
            continue
        roots.append(start)
        pos[start] = counter
        counter += 1
        stack = [(start, iter(adj[start]))]
        while stack:
            u, it = stack[-1]
            for v, o in it:
                pv = pos[v]
                if pv == -1:
                    parent[v] = u
                    pos[v] = counter
                    counter += 1
                    children[u].append((v, o))
                    stack.append((v, iter(adj[v])))
                    break
                if pv < pos[u] and v != parent[u]:
                    closures[v].append((u, o))
                    closures[u].append((v, o))
            else:
                stack.pop()

    dirchars: dict[tuple[int, int], str] = {}  # (from, to) -> char as written
    if stereo:
        _assign_directions(mol, stereo, pos, parent, dirchars)

    tokens = _atom_tokens(mol)
    free: list[int] = []
    next_digit = 1
    open_digit: dict[tuple[int, int], int] = {}

    def bond_text(u, v, o):
        if o == SINGLE:
            if dirchars:
                c = dirchars.get((u, v))
                if c:
                    return c
                c = dirchars.get((v, u))
                if c:
                    return _FLIP[c]
            return "-" if (atoms[u].aromatic and atoms[v].aromatic) else ""
        if o == DOUBLE:
            return "="
        if o == TRIPLE:
            return "#"
        return "" if (atoms[u].aromatic and atoms[v].aromatic) else ":"

    pieces = []
    for root in roots:
        out: list[str] = []
        stack: list = [root]
        while stack:
            u = stack.pop()
            if u.__class__ is str:
                out.append(u)
                continue
            ring = closures[u]
            ring_partners = []
            ring_text = ""
            if ring:
                pu = pos[u]
                closing = sorted((e for e in ring if pos[e[0]] < pu), key=lambda e: pos[e[0]])
                opening = sorted((e for e in ring if pos[e[0]] > pu), key=lambda e: ranks[e[0]])
                parts = []
                for v, _ in closing:
                    d = open_digit.pop((v, u))
                    parts.append(_digit_text(d))
                    heapq.heappush(free, d)
                    ring_partners.append(v)
                for v, o in opening:
                    if free:
                        d = heapq.heappop(free)
                    else:
                        d = next_digit
                        next_digit += 1
                    open_digit[(u, v)] = d
                    parts.append(bond_text(u, v, o) + _digit_text(d))
                    ring_partners.append(v)
                ring_text = "".join(parts)
            kids = children[u]
            if u in chiral:
                a = atoms[u]
                nbr_out = [] if parent[u] == -1 else [parent[u]]
                if a.hydrogens and -1 in a.chiral_order:
                    nbr_out.append(-1)
                nbr_out.extend(ring_partners)
                nbr_out.extend(v for v, _ in kids)
                chir = None
                if len(nbr_out) == len(a.chiral_order) and set(nbr_out) == set(a.chiral_order):
                    chir = a.chirality
                    if _parity(a.chiral_order, nbr_out):
                        chir = "@" if chir == "@@" else "@@"
                out.append(_bracket(a, chir) if chir else tokens[u])
            else:
                out.append(tokens[u])
            if ring_text:
                out.append(ring_text)
            if kids:
                v, o = kids[-1]
                stack.append(v)
                b = bond_text(u, v, o)
                if b:
                    stack.append(b)
                for v, o in reversed(kids[:-1]):
                    stack.append(")")
                    stack.append(v)
                    stack.append("(" + bond_text(u, v, o))
        pieces.append("".join(out))
    return ".".join(pieces)


def _assign_directions(mol, stereo, pos, parent, dirchars) -> None:
    """Choose '/' '\\' characters so each stereo double bond reads back correctly."""

    def written_from(u, v):
        if parent[v] == u:
            return u
        if parent[u] == v:
            return v
        return u if pos[u] < pos[v] else v

    def outward(atom, nbr):
        for key in ((atom, nbr), (nbr, atom)):
            if key in dirchars:
                c = dirchars[key]
                return c if key[0] == atom else _FLIP[c]
        return None

    def assign(atom, nbr, out_char):
        if written_from(atom, nbr) == atom:
            dirchars[(atom, nbr)] = out_char
        else:
            dirchars[(nbr, atom)] = _FLIP[out_char]

    for st in sorted(stereo, key=lambda s: min(pos[s.a], pos[s.b])):
        a, b, x, y, cis = st.a, st.b, st.x, st.y, st.cis
        if pos[b] < pos[a]:
            a, b, x, y = b, a, y, x
        subs_a = sorted((k for k in mol.neighbors(a) if k != b), key=lambda k: pos[k])
        subs_b = sorted((k for k in mol.neighbors(b) if k != a), key=lambda k: pos[k])
        if not subs_a or not subs_b:
            continue
        xa = next((k for k in subs_a if outward(a, k)), None)
        if xa is None:
            xa = subs_a[0]
            assign(a, xa, "/" if written_from(a, xa) == a else "\\")
        oa = outward(a, xa)
        yb = next((k for k in subs_b if outward(b, k)), None)
        target_y = yb if yb is not None else subs_b[0]
        rel = cis ^ (xa != x) ^ (target_y != y)
        if yb is None:
            assign(b, target_y, oa if rel else _FLIP[oa])


def to_canonical_smiles(m: Molecule) -> str:
    """Canonical SMILES: identical for isomorphic molecules with identical attributes."""
    return m.canonical_smiles


def random_smiles(m: Molecule, rng: random.Random) -> str:
    """A valid, randomly ordered SMILES spelling of ``m`` (stereo preserved)."""
    ranks = list(range(len(m.atoms)))
    rng.shuffle(ranks)
    chiral = [i for i, a in enumerate(m.atoms) if a.chirality and a.chiral_order is not None]
    return _write(m, ranks, chiral, m.stereo_bonds)


def canonicalize(smiles: str) -> str:
    return parse_smiles(smiles).canonical_smiles


def molecular_formula(m: Molecule) -> ElementCounts:
    """Element counts including hydrogens (explicit and implicit)."""
    counts: Counter[str] = Counter()
    for a in m.atoms:
        counts[a.element] += 1
        if a.hydrogens:
            counts["H"] += a.hydrogens
    return dict(counts)


def hill_formula(counts: ElementCounts) -> str:
    def part(el):
        c = counts[el]
        return el if c == 1 else f"{el}{c}"

    keys = [k for k, v in counts.items() if v > 0]
    if "C" in keys:
        head = [k for k in ("C", "H") if k in keys]
        rest = sorted(k for k in keys if k not in ("C", "H"))
    else:
        head, rest = [], sorted(keys)
    return "".join(part(k) for k in head + rest)


def parse_formula(text: str) -> ElementCounts:
    """Parse a Hill-notation formula such as ``C9H10N2O2PF2Cl``."""
    counts: Counter[str] = Counter()
    i, s = 0, text.strip()
    if not s:
        raise ParseError("empty formula", 0, text)
    while i < len(s):
        if not s[i].isupper():
            raise ParseError("expected element symbol", i, text)
        j = i + 1
        if j < len(s) and s[j].islower():
            j += 1
        sym = s[i:j]
        if sym not in ATOMIC_NUMBER:
            raise UnknownElement(f"unknown element {sym!r}", i, text)
        k = j
        while k < len(s) and s[k].isdigit():
            k += 1
        counts[sym] += int(s[j:k]) if k > j else 1
        i = k
    return dict(counts)
