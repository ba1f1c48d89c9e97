"""Retro reaction templates, backward application and reaction grounding.

Templates are written product-first, ``product>>reactant1.reactant2``, in a
SMARTS subset: bracket atoms built from element symbols (``C``, ``c``,
``#6``), ``H<n>``, ``D<n>``, ``X<n>``, charges, ``R``/``R0``, ``a``/``A`` and
``*``, combined with ``!``, ``&`` (or juxtaposition), ``,`` and ``;``, plus an
atom-map suffix ``:<n>``.  Bonds are ``- = # : ~`` or implicit (single or
aromatic).  Every product-side atom must carry a map number.

Backward application finds every embedding of the product pattern in a
molecule, deletes the pattern's bonds, adds the reactant patterns' bonds and
unmapped atoms, and recomputes hydrogens so each atom keeps its valence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .fingerprint import BitFingerprint, reaction_fingerprint, tanimoto
from .molgraph import (
    AROMATIC, ATOMIC_NUMBER, DOUBLE, SINGLE, TRIPLE, Atom, Bond, DoubleBondStereo,
    Molecule, ParseError, allowed_valences, implicit_hydrogens, parse_smiles,
    valence_shift, VALENCES,
)

DEFAULT_EMBEDDING_CAP = 64
DEFAULT_TOP_K = 100


class TemplateError(ParseError):
    pass


class UnsupportedPredicate(TemplateError):
    pass


class UnmappedProductAtom(TemplateError):
    pass


class RewriteValenceError(ValueError):
    pass


# --------------------------------------------------------------------------
# query graphs


@dataclass(frozen=True)
class Prim:
    """One atom predicate.

    kinds: ``elem`` (value = (element, aromatic)), ``num`` (atomic number),
    ``H`` (total hydrogens), ``D`` (heavy degree), ``X`` (degree + hydrogens),
    ``charge``, ``ring`` (bool), ``arom`` (bool), ``any``.
    """

    kind: str
    value: object = None


@dataclass(frozen=True)
class Op:
    op: str  # "not", "and" (high precedence), "or", "lo" (low-precedence and)
    args: tuple


@dataclass(frozen=True)
class QueryAtom:
    expr: object
    map_num: int = 0


@dataclass(frozen=True)
class QueryBond:
    begin: int
    end: int
    kind: str = ""  # "" implicit, or one of - = # : ~


@dataclass(frozen=True)
class QueryGraph:
    atoms: tuple[QueryAtom, ...]
    bonds: tuple[QueryBond, ...]

    @property
    def adjacency(self) -> list[list[tuple[int, str]]]:
        adj: list[list[tuple[int, str]]] = [[] for _ in self.atoms]
        for b in self.bonds:
            adj[b.begin].append((b.end, b.kind))
            adj[b.end].append((b.begin, b.kind))
        return adj

    def map_numbers(self) -> list[int]:
        return [a.map_num for a in self.atoms]


@dataclass(frozen=True)
class ReactionTemplate:
    """Equality and hashing are structural: id, source text and name are labels."""

    id: str = field(compare=False)
    product: QueryGraph
    reactants: tuple[QueryGraph, ...]
    source: str = field(compare=False)
    name: str | None = field(default=None, compare=False)

    @property
    def mapped_atom_count(self) -> int:
        return sum(1 for a in self.product.atoms if a.map_num)

    def serialize(self) -> str:
        return serialize_template(self)


_BARE_ATOMS = {
    "Cl": ("Cl", False), "Br": ("Br", False), "B": ("B", False), "C": ("C", False),
    "N": ("N", False), "O": ("O", False), "P": ("P", False), "S": ("S", False),
    "F": ("F", False), "I": ("I", False), "b": ("B", True), "c": ("C", True),
    "n": ("N", True), "o": ("O", True), "p": ("P", True), "s": ("S", True),
}
_AROMATIC_ELEMENTS = {"se": "Se", "as": "As", "te": "Te", "b": "B", "c": "C", "n": "N",
                      "o": "O", "p": "P", "s": "S"}
_BOND_KINDS = {"-": "-", "=": "=", "#": "#", ":": ":", "~": "~", "/": "-", "\\": "-"}
_KIND_ORDER = {"-": SINGLE, "=": DOUBLE, "#": TRIPLE, ":": AROMATIC}


class _BracketParser:
    def __init__(self, text: str, offset: int, source: str):
        self.s = text
        self.i = 0
        self.offset = offset
        self.source = source

    def error(self, msg, cls=TemplateError):
        return cls(msg, self.offset + self.i, self.source)

    def peek(self):
        return self.s[self.i] if self.i < len(self.s) else ""

    def parse(self):
        if not self.s:
            raise self.error("empty bracket atom")
        expr = self.lo()
        if self.i != len(self.s):
            raise self.error(f"unexpected {self.peek()!r} in atom expression", UnsupportedPredicate)
        return expr

    def lo(self):
        args = [self.orx()]
        while self.peek() == ";":
            self.i += 1
            args.append(self.orx())
        return args[0] if len(args) == 1 else Op("lo", tuple(args))

    def orx(self):
        args = [self.hi()]
        while self.peek() == ",":
            self.i += 1
            args.append(self.hi())
        return args[0] if len(args) == 1 else Op("or", tuple(args))

    def hi(self):
        args = [self.unary()]
        while self.peek() and self.peek() not in ";,":
            if self.peek() == "&":
                self.i += 1
            args.append(self.unary())
        return args[0] if len(args) == 1 else Op("and", tuple(args))

    def unary(self):
        if self.peek() == "!":
            self.i += 1
            return Op("not", (self.unary(),))
        return self.prim()

    def number(self, default=None):
        j = self.i
        while self.i < len(self.s) and self.s[self.i].isdigit():
            self.i += 1
        if j == self.i:
            if default is None:
                raise self.error("expected a number")
            return default
        return int(self.s[j:self.i])

    def prim(self):
        s, i = self.s, self.i
        c = self.peek()
        if not c:
            raise self.error("expected an atom primitive")
        if c == "*":
            self.i += 1
            return Prim("any")
        if c == "#":
            self.i += 1
            return Prim("num", self.number())
        if c in "+-":
            sign = 1 if c == "+" else -1
            self.i += 1
            if self.peek().isdigit():
                return Prim("charge", sign * self.number())
            n = 1
            while self.peek() == c:
                self.i += 1
                n += 1
            return Prim("charge", sign * n)
        two = s[i:i + 2]
        if c.islower():
            for sym in (two, c):
                if sym in _AROMATIC_ELEMENTS:
                    self.i += len(sym)
                    return Prim("elem", (_AROMATIC_ELEMENTS[sym], True))
            if c == "a":
                self.i += 1
                return Prim("arom", True)
            raise self.error(f"unsupported atom primitive {c!r}", UnsupportedPredicate)
        if c.isupper():
            if len(two) == 2 and two[1].islower() and two in ATOMIC_NUMBER:
                self.i += 2
                return Prim("elem", (two, False))
            if c in "HDX":
                self.i += 1
                if c == "H" and s == "H":
                    return Prim("elem", ("H", False))
                return Prim(c, self.number(1))
            if c == "R":
                self.i += 1
                n = self.number(-1)
                if n == -1:
                    return Prim("ring", True)
                if n == 0:
                    return Prim("ring", False)
                self.i -= len(str(n))
                raise self.error("ring-count primitives other than R and R0 are not supported",
                                 UnsupportedPredicate)
            if c == "A":
                self.i += 1
                return Prim("arom", False)
            if c in ATOMIC_NUMBER:
                self.i += 1
                return Prim("elem", (c, False))
        raise self.error(f"unsupported atom primitive {c!r}", UnsupportedPredicate)


def _parse_bracket(body: str, offset: int, source: str) -> QueryAtom:
    map_num = 0
    k = body.rfind(":")
    if k != -1 and body[k + 1:].isdigit():
        map_num = int(body[k + 1:])
        body = body[:k]
    return QueryAtom(_BracketParser(body, offset + 1, source).parse(), map_num)


def parse_pattern(text: str, offset: int = 0, source: str | None = None) -> QueryGraph:
    """Parse one connected SMARTS-subset pattern (no '.')."""
    source = text if source is None else source
    atoms: list[QueryAtom] = []
    bonds: dict[tuple[int, int], str] = {}
    stack: list[int] = []
    prev: int | None = None
    pending: str | None = None
    rings: dict[int, tuple[int, str | None, int]] = {}
    i, n = 0, len(text)

    def err(msg, pos, cls=TemplateError):
        return cls(msg, offset + pos, source)

    def add_bond(a, b, kind, pos):
        key = (min(a, b), max(a, b))
        if a == b or key in bonds:
            raise err("duplicate or self bond", pos)
        bonds[key] = kind or ""

    while i < n:
        c = text[i]
        if c == "[":
            j = text.find("]", i)
            if j == -1:
                raise err("unclosed bracket atom", i)
            atom = _parse_bracket(text[i + 1:j], offset + i, source)
            nxt = j + 1
        elif c == "*" or c in _BARE_ATOMS or text[i:i + 2] in _BARE_ATOMS:
            sym = text[i:i + 2] if text[i:i + 2] in _BARE_ATOMS else c
            atom = QueryAtom(Prim("any") if sym == "*" else Prim("elem", _BARE_ATOMS[sym]))
            nxt = i + len(sym)
        elif c == "(":
            if prev is None:
                raise err("branch before any atom", i)
            stack.append(prev)
            i += 1
            continue
        elif c == ")":
            if not stack:
                raise err("unbalanced ')'", i)
            prev = stack.pop()
            i += 1
            continue
        elif c in _BOND_KINDS:
            if pending is not None:
                raise err("two bond symbols in a row", i)
            pending = _BOND_KINDS[c]
            i += 1
            continue
        elif c.isdigit() or c == "%":
            if prev is None:
                raise err("ring closure before any atom", i)
            if c == "%":
                if len(text[i + 1:i + 3]) != 2 or not text[i + 1:i + 3].isdigit():
                    raise err("expected two digits after '%'", i)
                d, nxt = int(text[i + 1:i + 3]), i + 3
            else:
                d, nxt = int(c), i + 1
            if d in rings:
                a, kind, _ = rings.pop(d)
                if kind and pending and kind != pending:
                    raise err("conflicting ring-closure bond symbols", i)
                add_bond(a, prev, pending or kind, i)
            else:
                rings[d] = (prev, pending, i)
            pending = None
            i = nxt
            continue
        elif c == ".":
            raise err("'.' is not allowed inside a single pattern", i)
        else:
            raise err(f"unsupported token {c!r}", i, UnsupportedPredicate)
        atoms.append(atom)
        k = len(atoms) - 1
        if prev is not None:
            add_bond(prev, k, pending, i)
        elif pending is not None:
            raise err("bond symbol before first atom", i)
        pending = None
        prev = k
        i = nxt
    if stack:
        raise err("unbalanced '('", n)
    if rings:
        d, (_, _, pos) = next(iter(rings.items()))
        raise err(f"unclosed ring bond {d}", pos)
    if pending is not None:
        raise err("dangling bond symbol", n)
    if not atoms:
        raise err("empty pattern", 0)
    qbonds = tuple(QueryBond(a, b, k) for (a, b), k in sorted(bonds.items()))
    return QueryGraph(tuple(atoms), qbonds)


def _split_dots(text: str) -> list[tuple[str, int]]:
    parts, depth, start = [], 0, 0
    for i, c in enumerate(text):
        if c == "[":
            depth += 1
        elif c == "]":
            depth -= 1
        elif c == "." and depth == 0:
            parts.append((text[start:i], start))
            start = i + 1
    parts.append((text[start:], start))
    return parts


def parse_template(text: str, id: str = "", name: str | None = None) -> ReactionTemplate:
    """Parse ``product>>reactant1.reactant2`` into a ReactionTemplate."""
    src = text.strip()
    if src.count(">>") != 1 or src.replace(">>", "").count(">"):
        raise TemplateError("template must contain exactly one '>>'", None, src)
    k = src.index(">>")
    left, right = src[:k], src[k + 2:]
    if not left or not right:
        raise TemplateError("template needs a product and reactant side", k, src)
    if len(_split_dots(left)) != 1:
        raise TemplateError("product side must be a single pattern", _split_dots(left)[1][1] - 1, src)
    product = parse_pattern(left, 0, src)
    reactants = tuple(parse_pattern(part, k + 2 + off, src) for part, off in _split_dots(right))
    pmaps = product.map_numbers()
    for idx, m in enumerate(pmaps):
        if not m:
            raise UnmappedProductAtom(f"product atom {idx} has no map number", None, src)
    if len(set(pmaps)) != len(pmaps):
        raise TemplateError("duplicate map number on product side", None, src)
    seen: dict[int, int] = {}
    for r in reactants:
        for m in r.map_numbers():
            if m:
                seen[m] = seen.get(m, 0) + 1
    for m in pmaps:
        if seen.get(m, 0) != 1:
            raise UnmappedProductAtom(
                f"product map number {m} must appear in exactly one reactant pattern", None, src)
    extra = sorted(set(seen) - set(pmaps))
    if extra:
        raise TemplateError(f"reactant map number {extra[0]} is absent from the product", None, src)
    return ReactionTemplate(id or src, product, reactants, src, name)


# serialization


def _expr_text(e) -> str:
    if isinstance(e, Prim):
        k, v = e.kind, e.value
        if k == "any":
            return "*"
        if k == "elem":
            sym, arom = v
            return sym.lower() if arom else sym
        if k == "num":
            return f"#{v}"
        if k in ("H", "D", "X"):
            return f"{k}{v}"
        if k == "charge":
            return f"+{v}" if v >= 0 else f"-{-v}"
        if k == "ring":
            return "R" if v else "R0"
        if k == "arom":
            return "a" if v else "A"
        raise ValueError(k)
    sep = {"and": "&", "or": ",", "lo": ";"}
    if e.op == "not":
        return "!" + _expr_text(e.args[0])
    return sep[e.op].join(_expr_text(a) for a in e.args)


def serialize_pattern(g: QueryGraph) -> str:
    adj = [sorted(nb) for nb in g.adjacency]
    n = len(g.atoms)
    visited = [False] * n
    parent = [-1] * n
    children: list[list[int]] = [[] for _ in range(n)]
    ring_pairs: list[tuple[int, int]] = []

    pos: dict[int, int] = {}

    def dfs(u):
        visited[u] = True
        pos[u] = len(pos)
        for v, _ in adj[u]:
            if not visited[v]:
                parent[v] = u
                children[u].append(v)
                dfs(v)
            elif v != parent[u] and pos[v] < pos[u]:
                ring_pairs.append((v, u))

    dfs(0)
    kinds = {(min(b.begin, b.end), max(b.begin, b.end)): b.kind for b in g.bonds}
    digit_at: dict[int, list[tuple[int, str]]] = {}
    for k, (a, b) in enumerate(ring_pairs, start=1):
        kind = kinds[(min(a, b), max(a, b))]
        digit_at.setdefault(a, []).append((k, kind))
        digit_at.setdefault(b, []).append((k, ""))

    def atom_text(u):
        a = g.atoms[u]
        body = _expr_text(a.expr)
        return f"[{body}:{a.map_num}]" if a.map_num else f"[{body}]"

    def write(u):
        parts = [atom_text(u)]
        for d, kind in digit_at.get(u, []):
            parts.append(kind + (str(d) if d < 10 else f"%{d:02d}"))
        for idx, v in enumerate(children[u]):
            chunk = kinds[(min(u, v), max(u, v))] + write(v)
            parts.append(chunk if idx == len(children[u]) - 1 else f"({chunk})")
        return "".join(parts)

    return write(0)


def serialize_template(t: ReactionTemplate) -> str:
    return serialize_pattern(t.product) + ">>" + ".".join(serialize_pattern(r) for r in t.reactants)


# --------------------------------------------------------------------------
# matching


class _Features:
    __slots__ = ("z", "arom", "h", "deg", "charge", "ring", "adj", "orders")

    def __init__(self, m: Molecule):
        self.z = [ATOMIC_NUMBER.get(a.element, 0) for a in m.atoms]
        self.arom = [a.aromatic for a in m.atoms]
        self.h = [a.hydrogens for a in m.atoms]
        self.deg = [m.degree(i) for i in range(len(m.atoms))]
        self.charge = [a.charge for a in m.atoms]
        ring = m.ring_atoms
        self.ring = [i in ring for i in range(len(m.atoms))]
        self.adj = [[j for j, _ in nb] for nb in m.adjacency]
        self.orders = {}
        for b in m.bonds:
            self.orders[(b.begin, b.end)] = b.order
            self.orders[(b.end, b.begin)] = b.order


def _eval(e, f: _Features, i: int) -> bool:
    if isinstance(e, Prim):
        k, v = e.kind, e.value
        if k == "elem":
            return f.z[i] == ATOMIC_NUMBER[v[0]] and f.arom[i] == v[1]
        if k == "num":
            return f.z[i] == v
        if k == "H":
            return f.h[i] == v
        if k == "D":
            return f.deg[i] == v
        if k == "X":
            return f.deg[i] + f.h[i] == v
        if k == "charge":
            return f.charge[i] == v
        if k == "ring":
            return f.ring[i] == v
        if k == "arom":
            return f.arom[i] == v
        return True
    if e.op == "not":
        return not _eval(e.args[0], f, i)
    if e.op == "or":
        return any(_eval(a, f, i) for a in e.args)
    return all(_eval(a, f, i) for a in e.args)


def _bond_ok(kind: str, order: int) -> bool:
    if kind == "~":
        return True
    if kind == "":
        return order in (SINGLE, AROMATIC)
    return _KIND_ORDER[kind] == order


def atom_matches(q: QueryAtom, m: Molecule, i: int) -> bool:
    return _eval(q.expr, _Features(m), i)


def _match_plan(g: QueryGraph):
    """BFS order over the pattern; for each atom its anchor and the earlier bonds to check."""
    adj = g.adjacency
    order, seen = [0], {0}
    k = 0
    while k < len(order):
        for v, _ in sorted(adj[order[k]]):
            if v not in seen:
                seen.add(v)
                order.append(v)
        k += 1
    pos = {u: k for k, u in enumerate(order)}
    plan = []
    for u in order:
        back = [(v, kind) for v, kind in adj[u] if pos[v] < pos[u]]
        back.sort(key=lambda t: pos[t[0]])
        plan.append((u, back))
    return plan


def find_embeddings(g: QueryGraph, m: Molecule, cap: int | None = DEFAULT_EMBEDDING_CAP,
                    features: _Features | None = None) -> list[tuple[int, ...]]:
    """Distinct injective embeddings of a connected pattern, as pattern-index -> atom-index tuples.

    Backtracking in the VF2 style: pattern atoms are taken in BFS order and
    candidates for each one are drawn from the neighbours of an already
    matched pattern neighbour, so partial matches stay connected.
    """
    f = features or _Features(m)
    plan = _match_plan(g)
    k = len(plan)
    n = len(m.atoms)
    if k > n:
        return []
    assign = [-1] * len(g.atoms)
    used = [False] * n
    out: list[tuple[int, ...]] = []
    atoms = g.atoms

    def extend(depth):
        if cap is not None and len(out) >= cap:
            return
        if depth == k:
            out.append(tuple(assign))
            return
        u, back = plan[depth]
        cands = range(n) if not back else f.adj[assign[back[0][0]]]
        q = atoms[u].expr
        for i in cands:
            if used[i] or not _eval(q, f, i):
                continue
            ok = True
            for v, kind in back:
                order = f.orders.get((i, assign[v]))
                if order is None or not _bond_ok(kind, order):
                    ok = False
                    break
            if not ok:
                continue
            assign[u] = i
            used[i] = True
            extend(depth + 1)
            used[i] = False
            assign[u] = -1
            if cap is not None and len(out) >= cap:
                return

    extend(0)
    return out


# --------------------------------------------------------------------------
# rewriting


def _specified(expr) -> dict:
    """Attributes fixed by the top-level conjunction of a reactant-side atom."""
    spec: dict = {}
    items = [expr]
    while items:
        e = items.pop()
        if isinstance(e, Op):
            if e.op in ("and", "lo"):
                items.extend(e.args)
            continue
        if e.kind == "elem":
            spec["element"], spec["aromatic"] = e.value
        elif e.kind == "num":
            spec.setdefault("element", _element_of(e.value))
        elif e.kind == "H":
            spec["hydrogens"] = e.value
        elif e.kind == "charge":
            spec["charge"] = e.value
        elif e.kind == "arom":
            spec["aromatic"] = e.value
    return spec


def _element_of(z: int) -> str:
    for sym, num in ATOMIC_NUMBER.items():
        if num == z:
            return sym
    raise ValueError(z)


def _valence_used(bonds: dict, i: int) -> int:
    return sum(1 if o == AROMATIC else o for (a, b), o in bonds.items() if a == i)


def rewrite(t: ReactionTemplate, m: Molecule, embedding: Sequence[int]) -> tuple[Molecule, ...]:
    """Reactant molecules obtained by undoing ``t`` at one embedding of its product pattern."""
    idx_of_map = {qa.map_num: embedding[k] for k, qa in enumerate(t.product.atoms)}
    atoms = [dict(element=a.element, aromatic=a.aromatic, charge=a.charge, hydrogens=a.hydrogens,
                  isotope=a.isotope, chirality=a.chirality, chiral_order=a.chiral_order,
                  map_num=a.map_num) for a in m.atoms]
    bonds: dict[tuple[int, int], int] = {}
    for b in m.bonds:
        bonds[(b.begin, b.end)] = b.order
        bonds[(b.end, b.begin)] = b.order
    original = dict(bonds)
    for qb in t.product.bonds:
        i, j = embedding[qb.begin], embedding[qb.end]
        bonds.pop((i, j), None)
        bonds.pop((j, i), None)

    touched: set[int] = set()
    explicit_h: set[int] = set()
    new_atoms: set[int] = set()
    for r in t.reactants:
        local = []
        for qa in r.atoms:
            spec = _specified(qa.expr)
            if qa.map_num:
                i = idx_of_map[qa.map_num]
            else:
                if "element" not in spec:
                    raise RewriteValenceError("unmapped reactant atom needs an element")
                i = len(atoms)
                atoms.append(dict(element=spec["element"], aromatic=False, charge=0, hydrogens=0,
                                  isotope=None, chirality=None, chiral_order=None, map_num=0))
                new_atoms.add(i)
            rec = atoms[i]
            for key in ("element", "aromatic", "charge", "hydrogens"):
                if key in spec:
                    rec[key] = spec[key]
            if "hydrogens" in spec:
                explicit_h.add(i)
            touched.add(i)
            local.append(i)
        for qb in r.bonds:
            i, j = local[qb.begin], local[qb.end]
            if qb.kind in _KIND_ORDER:
                order = _KIND_ORDER[qb.kind]
            elif (i, j) in original and (qb.kind == "~" or original[(i, j)] in (SINGLE, AROMATIC)):
                order = original[(i, j)]  # unspecified means single-or-aromatic
            else:
                order = AROMATIC if atoms[i]["aromatic"] and atoms[j]["aromatic"] else SINGLE
            bonds[(i, j)] = order
            bonds[(j, i)] = order

    changed = set()
    for i in range(len(atoms)):
        if i in new_atoms:
            continue
        before = {b for (a, b) in original if a == i}
        after = {b for (a, b) in bonds if a == i}
        if before != after or any(original[(i, b)] != bonds[(i, b)] for b in after):
            changed.add(i)

    for i in touched | changed:
        rec = atoms[i]
        used_new = _valence_used(bonds, i)
        if i in new_atoms:
            if i not in explicit_h:
                if rec["element"] in VALENCES:
                    h = implicit_hydrogens(rec["element"], rec["aromatic"], used_new)
                    if h is None:
                        raise RewriteValenceError(f"new atom {rec['element']} exceeds its valence")
                    rec["hydrogens"] = h + valence_shift(rec["element"], rec["charge"])
        elif i not in explicit_h:
            old = m.atoms[i]
            used_old = _valence_used(original, i)
            rec["hydrogens"] = (old.hydrogens + used_old - used_new
                                + valence_shift(rec["element"], rec["charge"])
                                - valence_shift(old.element, old.charge))
        if rec["hydrogens"] < 0:
            raise RewriteValenceError(f"atom {i} ({rec['element']}) would need negative hydrogens")
        vals = allowed_valences(rec["element"], rec["charge"])
        if vals is not None and (not vals or used_new + rec["hydrogens"] > vals[-1]):
            raise RewriteValenceError(f"atom {i} ({rec['element']}) exceeds its valence")

    for i in changed:
        atoms[i]["chirality"] = None
        atoms[i]["chiral_order"] = None
    stereo = tuple(
        s for s in m.stereo_bonds
        if not ({s.a, s.b, s.x, s.y} & changed) and bonds.get((s.a, s.b)) == DOUBLE
    )
    new_mol = Molecule(
        tuple(Atom(**rec) for rec in atoms),
        tuple(Bond(a, b, o) for (a, b), o in sorted(bonds.items()) if a < b),
        stereo,
    )
    frags = new_mol.fragments()
    return tuple(sorted(frags, key=lambda x: x.canonical_smiles))


def apply_backward(t: ReactionTemplate, product: Molecule,
                   cap: int | None = DEFAULT_EMBEDDING_CAP) -> list[tuple[Molecule, ...]]:
    """Distinct reactant sets for every embedding of the product pattern, sorted by SMILES.

    Raises RewriteValenceError when an embedding's rewrite breaks a valence.
    """
    results: dict[tuple[str, ...], tuple[Molecule, ...]] = {}
    for emb in find_embeddings(t.product, product, cap):
        mols = rewrite(t, product, emb)
        results.setdefault(tuple(x.canonical_smiles for x in mols), mols)
    return [results[k] for k in sorted(results)]


@lru_cache(maxsize=100_000)
def _applicable_sets(t: ReactionTemplate, product_smiles: str, cap: int | None) -> tuple[tuple[str, ...], ...]:
    try:
        sets = apply_backward(t, parse_smiles(product_smiles), cap)
    except RewriteValenceError:
        return ()
    return tuple(tuple(x.canonical_smiles for x in s) for s in sets)


def reactant_sets(t: ReactionTemplate, product: Molecule,
                  cap: int | None = DEFAULT_EMBEDDING_CAP) -> tuple[tuple[str, ...], ...]:
    """Canonical reactant sets of ``apply_backward``; empty when the rewrite is infeasible (cached)."""
    return _applicable_sets(t, product.canonical_smiles, cap)


# --------------------------------------------------------------------------
# template and reaction stores


class TemplateLibrary:
    def __init__(self, templates: Iterable[ReactionTemplate] = ()):
        self._by_id: dict[str, ReactionTemplate] = {}
        self._by_source: dict[str, ReactionTemplate] = {}
        for t in templates:
            self.add(t)

    def add(self, t: ReactionTemplate) -> None:
        if t.id in self._by_id:
            raise ValueError(f"duplicate template id {t.id!r}")
        self._by_id[t.id] = t
        self._by_source[t.source] = t

    def get(self, key: str) -> ReactionTemplate | None:
        key = key.strip()
        return self._by_id.get(key) or self._by_source.get(key)

    def __getitem__(self, key: str) -> ReactionTemplate:
        t = self.get(key)
        if t is None:
            raise KeyError(key)
        return t

    def __contains__(self, key) -> bool:
        return self.get(key) is not None

    def __iter__(self) -> Iterator[ReactionTemplate]:
        return iter(self._by_id.values())

    def __len__(self):
        return len(self._by_id)


def load_templates(path: str | Path) -> TemplateLibrary:
    """JSON lines ``{"id", "smarts", "name"?}``."""
    lib = TemplateLibrary()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            lib.add(parse_template(rec["smarts"], rec["id"], rec.get("name")))
        except (KeyError, json.JSONDecodeError, TemplateError) as exc:
            raise TemplateError(f"{path}:{lineno}: {exc}") from exc
    return lib


@dataclass(frozen=True)
class ReactionRecord:
    rsmi: str
    reactants: tuple[str, ...]
    product: str
    template_id: str | None = None
    fingerprint: BitFingerprint | None = field(default=None, compare=False, repr=False)
    index: int = -1


def reaction_key(reactants: Iterable[Molecule], product: Molecule) -> str:
    return ".".join(sorted(r.canonical_smiles for r in reactants)) + ">>" + product.canonical_smiles


def _side(text: str) -> list[Molecule]:
    text = text.strip()
    if not text:
        return []
    return parse_smiles(text).fragments()


def split_reaction(text: str) -> tuple[str, str]:
    s = text.strip()
    if ">>" in s:
        left, _, right = s.partition(">>")
        if ">" in right:
            raise ParseError("more than one '>>' in reaction", None, text)
        return left, right
    parts = s.split(">")
    if len(parts) == 3:
        return parts[0], parts[2]  # agents are dropped
    raise ParseError("reaction SMILES needs '>>'", None, text)


def parse_reaction(text: str) -> tuple[tuple[Molecule, ...], Molecule]:
    """Forward reaction ``reactants>>product``."""
    left, right = split_reaction(text)
    reactants = _side(left)
    if not reactants:
        raise ParseError("reaction has no reactants", None, text)
    if not right.strip():
        raise ParseError("reaction has no product", None, text)
    return tuple(reactants), parse_smiles(right)


def orient_reaction(text: str, product: Molecule | None = None) -> tuple[tuple[Molecule, ...], Molecule]:
    """Read a proposed reaction as (reactants, product).

    Proposers are asked for ``product>>reactants``; a forward spelling is also
    accepted when its right-hand side is the declared product.
    """
    left, right = split_reaction(text)
    if not left.strip() or not right.strip():
        raise ParseError("reaction needs two non-empty sides", None, text)
    lmol, rmol = parse_smiles(left), parse_smiles(right)
    if product is not None:
        p = product.canonical_smiles
        if lmol.canonical_smiles == p:
            return tuple(rmol.fragments()), lmol
        if rmol.canonical_smiles == p:
            return tuple(lmol.fragments()), rmol
    return tuple(rmol.fragments()), lmol


def strip_maps(m: Molecule) -> Molecule:
    if not any(a.map_num for a in m.atoms):
        return m
    from dataclasses import replace
    return Molecule(tuple(replace(a, map_num=0) for a in m.atoms), m.bonds, m.stereo_bonds)


class ReactionDatabase:
    def __init__(self, records: Iterable[ReactionRecord] = ()):
        self.records: list[ReactionRecord] = []
        self.by_key: dict[str, ReactionRecord] = {}
        for r in records:
            self._append(r)

    def _append(self, r: ReactionRecord) -> None:
        r = ReactionRecord(r.rsmi, r.reactants, r.product, r.template_id, r.fingerprint, len(self.records))
        self.records.append(r)
        self.by_key.setdefault(r.rsmi, r)

    def add(self, rsmi: str, template_id: str | None = None) -> ReactionRecord:
        reactants, product = parse_reaction(rsmi)
        reactants = tuple(strip_maps(x) for x in reactants)
        product = strip_maps(product)
        fp = reaction_fingerprint(reactants, product)
        key = reaction_key(reactants, product)
        rec = ReactionRecord(key, tuple(sorted(x.canonical_smiles for x in reactants)),
                             product.canonical_smiles, template_id, fp)
        self._append(rec)
        return self.records[-1]

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def load_reaction_db(path: str | Path) -> ReactionDatabase:
    """JSON lines ``{"rsmi": "reactants>>product", "template_id"?}``."""
    db = ReactionDatabase()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            db.add(rec["rsmi"], rec.get("template_id"))
        except (KeyError, json.JSONDecodeError, ParseError) as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return db


# --------------------------------------------------------------------------
# grounding


@dataclass(frozen=True)
class Exact:
    record: ReactionRecord
    kind: str = "exact"


@dataclass(frozen=True)
class Similar:
    record: ReactionRecord
    similarity: float
    kind: str = "similar"

    def __post_init__(self):
        if not 0.0 <= self.similarity <= 1.0:
            raise ValueError("similarity outside [0, 1]")


@dataclass(frozen=True)
class NonExistent:
    kind: str = "nonexistent"


MatchOutcome = Exact | Similar | NonExistent


def record_applies(rec: ReactionRecord, product: Molecule, templates: TemplateLibrary | None,
                   cap: int | None = DEFAULT_EMBEDDING_CAP) -> bool:
    """A record is feasible for ``product`` if its template yields reactants there.

    Records without a template are replayed as-is, which only works for the
    record's own product.
    """
    if rec.template_id is not None:
        t = templates.get(rec.template_id) if templates is not None else None
        return t is not None and bool(reactant_sets(t, product, cap))
    return rec.product == product.canonical_smiles


def ground_reaction(proposed: str, product: Molecule, db: ReactionDatabase,
                    templates: TemplateLibrary | None = None, top_k: int = DEFAULT_TOP_K,
                    cap: int | None = DEFAULT_EMBEDDING_CAP) -> MatchOutcome:
    """Match a proposed reaction against known reactions.

    Order of preference: a template reference or exact database reaction,
    then the most similar of the ``top_k`` nearest records that can be
    applied to ``product``, else NonExistent.
    """
    if templates is not None:
        t = templates.get(proposed)
        if t is not None:
            return Exact(ReactionRecord(t.source, (), product.canonical_smiles, t.id))
    reactants, prod = orient_reaction(proposed, product)
    reactants = tuple(strip_maps(x) for x in reactants)
    prod = strip_maps(prod)
    key = reaction_key(reactants, prod)
    rec = db.by_key.get(key)
    if rec is not None:
        return Exact(rec)
    if not db.records:
        return NonExistent()
    fp = reaction_fingerprint(reactants, prod)
    scored = sorted(((tanimoto(fp, r.fingerprint), r.index) for r in db.records),
                    key=lambda t: (-t[0], t[1]))
    for sim, i in scored[:top_k]:
        r = db.records[i]
        if record_applies(r, product, templates, cap):
            return Similar(r, sim)
    return NonExistent()


def grounded_reactant_sets(outcome: MatchOutcome, product: Molecule,
                           templates: TemplateLibrary | None,
                           cap: int | None = DEFAULT_EMBEDDING_CAP) -> tuple[tuple[str, ...], ...]:
    """Reactant sets the grounded reaction produces for ``product`` (canonical SMILES)."""
    if isinstance(outcome, NonExistent):
        return ()
    rec = outcome.record
    if rec.template_id is not None:
        t = templates.get(rec.template_id) if templates is not None else None
        return reactant_sets(t, product, cap) if t is not None else ()
    if rec.product == product.canonical_smiles:
        return (rec.reactants,)
    return ()
