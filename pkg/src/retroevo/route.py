"""Sequential synthesis routes: parsing, step-by-step evaluation and partial reward.

A route is a list of steps.  Each step names the molecule set it starts
from, the product it disconnects, the reaction, the reactants and the
resulting set.  Evaluation checks every step at three levels (molecules,
reaction, connectivity), locates the first invalid step and reports the
frontier set that the reward is computed on.
"""

from __future__ import annotations

import ast
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .molgraph import Molecule, ParseError, parse_smiles
from .stock import Stock
from .template import (
    Exact, NonExistent, ReactionDatabase, Similar, TemplateLibrary, ground_reaction,
    grounded_reactant_sets,
)

FIELDS = ("molecule_set", "rational", "product", "reaction", "reactants", "updated_molecule_set")
DISPLAY_KEYS = {
    "molecule_set": "Molecule set",
    "rational": "Rational",
    "product": "Product",
    "reaction": "Reaction",
    "reactants": "Reactants",
    "updated_molecule_set": "Updated molecule set",
}
_ALIASES = {
    "molecule_set": "molecule_set", "molecules_set": "molecule_set", "molecule_sets": "molecule_set",
    "starting_molecule_set": "molecule_set", "current_molecule_set": "molecule_set",
    "rational": "rational", "rationale": "rational", "reasoning": "rational", "analysis": "rational",
    "product": "product", "products": "product", "product_molecule": "product",
    "reaction": "reaction", "reactions": "reaction", "reaction_template": "reaction",
    "reaction_smiles": "reaction", "template": "reaction",
    "reactants": "reactants", "reactant": "reactants",
    "updated_molecule_set": "updated_molecule_set", "updated_molecules_set": "updated_molecule_set",
    "updated_set": "updated_molecule_set", "updated_molecules": "updated_molecule_set",
    "new_molecule_set": "updated_molecule_set",
}
UNPARSABLE_PENALTY = 5.0


class RouteFormatError(ValueError):
    pass


class MissingRouteBlock(RouteFormatError):
    pass


class EmptyRoute(RouteFormatError):
    pass


class StepSchemaError(RouteFormatError):
    def __init__(self, step: int, field_name: str, message: str | None = None):
        self.step = step
        self.field = field_name
        super().__init__(message or f"step {step} is missing {field_name!r}")


@dataclass(frozen=True)
class RouteStep:
    molecule_set: tuple[str, ...]
    rational: str
    product: str
    reaction: str
    reactants: tuple[str, ...]
    updated_molecule_set: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "molecule_set": list(self.molecule_set),
            "rational": self.rational,
            "product": self.product,
            "reaction": self.reaction,
            "reactants": list(self.reactants),
            "updated_molecule_set": list(self.updated_molecule_set),
        }

    @classmethod
    def from_dict(cls, d: dict, index: int = 1) -> RouteStep:
        return _step_from_raw(d, index)


@dataclass(frozen=True)
class Route:
    target: str
    steps: tuple[RouteStep, ...] = ()
    provenance: str = "scripted"
    raw_text: str | None = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {"target": self.target, "provenance": self.provenance,
                "steps": [s.to_dict() for s in self.steps]}

    @classmethod
    def from_dict(cls, d: dict) -> Route:
        steps = tuple(_step_from_raw(s, k) for k, s in enumerate(d.get("steps", []), start=1))
        return cls(d["target"], steps, d.get("provenance", "scripted"))

    def with_steps(self, steps: Sequence[RouteStep], provenance: str | None = None) -> Route:
        return Route(self.target, tuple(steps), provenance or self.provenance, self.raw_text)


# --------------------------------------------------------------------------
# lenient parsing of proposer output

_BLOCK_RE = re.compile(r"<\s*ROUTE\s*>(.*?)(?:<\s*/\s*ROUTE\s*>|$)", re.S | re.I)
_KEY_RE = re.compile(r"""(?:(?<=[{,\n])|^)\s*['"]?([A-Za-z][A-Za-z _\-]{1,40}?)['"]?\s*:""", re.M)


def _norm_key(k: str) -> str | None:
    k = re.sub(r"[\s\-]+", "_", str(k).strip().strip("'\"").strip().lower())
    return _ALIASES.get(k)


def _dict_regions(text: str) -> list[str]:
    out, depth, start = [], 0, -1
    for i, c in enumerate(text):
        if c == "{":
            if depth == 0:
                start = i + 1
            depth += 1
        elif c == "}" and depth:
            depth -= 1
            if depth == 0:
                out.append(text[start:i])
    return out


def _scan_dict(body: str) -> dict:
    hits = [(m.start(), m.end(), _norm_key(m.group(1))) for m in _KEY_RE.finditer(body)]
    hits = [h for h in hits if h[2] is not None]
    out: dict = {}
    for k, (s, e, name) in enumerate(hits):
        end = hits[k + 1][0] if k + 1 < len(hits) else len(body)
        value = body[e:end].strip().rstrip(",").strip()
        out.setdefault(name, _literal(value))
    return out


def _literal(value: str):
    for loader in (json.loads, ast.literal_eval):
        try:
            return loader(value)
        except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
            continue
    return value


def _raw_steps(block: str) -> list[dict]:
    data = _literal(block.strip())
    if isinstance(data, dict):
        for key in ("steps", "route", "Route", "Steps"):
            if isinstance(data.get(key), list):
                data = data[key]
                break
        else:
            data = [data]
    if isinstance(data, (list, tuple)) and all(isinstance(d, dict) for d in data):
        return [dict(d) for d in data]
    return [_scan_dict(body) for body in _dict_regions(block)]


def _unquote(s: str) -> str:
    s = s.strip()
    while len(s) >= 2 and s[0] == s[-1] and s[0] in "'\"`":
        s = s[1:-1].strip()
    return s


def _parses(s: str) -> bool:
    try:
        parse_smiles(s)
        return True
    except ParseError:
        return False


def _strip_list_brackets(s: str) -> str:
    s = _unquote(s)
    if s.startswith("[") and s.endswith("]") and not _parses(s):
        return s[1:-1].strip()
    return s


def _as_list(value) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, (list, tuple)):
        items = []
        for v in value:
            items.extend(_as_list(v))
        return tuple(items)
    s = _strip_list_brackets(str(value))
    out = []
    for part in s.split(","):
        part = _strip_list_brackets(part)
        if not part:
            continue
        out.extend(p.strip() for p in part.split(".") if p.strip())
    return tuple(out)


def _as_single(value) -> str:
    items = _as_list(value)
    return ".".join(items)


def _clean_reaction(value) -> str:
    if isinstance(value, (list, tuple)):
        value = value[0] if value else ""
    s = _unquote(str(value))
    if s.startswith("[") and s.endswith("]") and ">" in s:
        left = s.split(">", 1)[0]
        if not _parses(left):
            s = s[1:-1].strip()
    return _unquote(s)


def _step_from_raw(raw: dict, index: int) -> RouteStep:
    norm: dict = {}
    for k, v in raw.items():
        name = _norm_key(k) if _norm_key(k) else (k if k in FIELDS else None)
        if name is not None and name not in norm:
            norm[name] = v
    for name in FIELDS:
        if name not in norm:
            raise StepSchemaError(index, name)
    rational = norm["rational"]
    return RouteStep(
        molecule_set=_as_list(norm["molecule_set"]),
        rational=_unquote(str(rational)) if rational is not None else "",
        product=_as_single(norm["product"]),
        reaction=_clean_reaction(norm["reaction"]),
        reactants=_as_list(norm["reactants"]),
        updated_molecule_set=_as_list(norm["updated_molecule_set"]),
    )


def extract_route_block(text: str) -> str:
    m = _BLOCK_RE.search(text or "")
    if m is None:
        raise MissingRouteBlock("no <ROUTE> block found")
    return m.group(1)


def parse_route_block(text: str, target: str | None = None, provenance: str = "scripted") -> Route:
    """Parse the first ``<ROUTE>...</ROUTE>`` region of proposer output.

    Accepts JSON, Python-literal and loosely quoted pseudo-records; key
    spellings such as "Molecule set" or "updated_molecule_set" are
    normalised.  The target defaults to the first step's molecule set.
    """
    block = extract_route_block(text)
    raws = _raw_steps(block)
    if not raws:
        raise EmptyRoute("route block holds no steps")
    steps = tuple(_step_from_raw(r, k) for k, r in enumerate(raws, start=1))
    if target is None:
        target = ".".join(steps[0].molecule_set)
        if not target:
            raise StepSchemaError(1, "molecule_set", "cannot infer target from an empty first molecule set")
    return Route(target, steps, provenance, text)


def route_to_block(route: Route | Sequence[RouteStep]) -> str:
    steps = route.steps if isinstance(route, Route) else route
    records = [{DISPLAY_KEYS[k]: v for k, v in s.to_dict().items()} for s in steps]
    return "<ROUTE>\n" + json.dumps(records, indent=4) + "\n</ROUTE>"


# --------------------------------------------------------------------------
# scoring


ComplexityScorer = Callable[[Molecule], float]


def heuristic_sc_score(m: Molecule) -> float:
    """Size/ring/stereo/heteroatom surrogate for synthetic complexity, clamped to [1, 5]."""
    heavy = m.heavy_atom_count
    hetero = sum(1 for a in m.atoms if a.element not in ("C", "H"))
    score = (1 + 0.35 * math.log2(heavy + 1) + 0.4 * m.ring_count
             + 0.3 * m.stereocenter_count + 0.2 * hetero / 4)
    return min(5.0, max(1.0, score))


def _canon_or_none(s: str) -> str | None:
    try:
        return parse_smiles(s).canonical_smiles
    except ParseError:
        return None


def route_reward(frontier: Iterable[Molecule | str], scorer: ComplexityScorer = heuristic_sc_score,
                 stock: Stock | None = None) -> float:
    """F = -(sum of scores over frontier members that are not purchasable).

    Members given as text that fail to parse count with the maximum score.
    """
    total = 0.0
    for m in frontier:
        if isinstance(m, str):
            try:
                m = parse_smiles(m)
            except ParseError:
                total += UNPARSABLE_PENALTY
                continue
        if stock is not None and m.canonical_smiles in stock.smiles:
            continue
        total += scorer(m)
    return -total if total else 0.0


# --------------------------------------------------------------------------
# evaluation


@dataclass
class StepVerdict:
    index: int
    molecule_valid: bool
    invalid_molecules: tuple[str, ...] = ()
    availability: dict[str, bool] = field(default_factory=dict)
    reaction_exists: bool | None = None
    reaction_valid: bool | None = None
    connected: bool | None = None
    grounding: str | None = None
    grounded_reaction: str | None = None
    similarity: float | None = None
    template_id: str | None = None
    grounded_reactants: tuple[str, ...] | None = None
    rewritten_updated_set: tuple[str, ...] | None = None
    expected_sets: tuple[tuple[str, ...], ...] = ()
    messages: list[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        """Every check except availability passed."""
        return (self.molecule_valid and self.reaction_exists is True
                and self.reaction_valid is True and self.connected is True)

    def failed_checks(self) -> list[str]:
        out = []
        if not self.molecule_valid:
            out.append("molecule_validity")
        if self.reaction_exists is False:
            out.append("reaction_existence")
        if self.reaction_valid is False:
            out.append("reaction_validity")
        if self.connected is False:
            out.append("connectivity")
        return out

    def verdict_vector(self) -> dict:
        return {
            "molecule_valid": self.molecule_valid,
            "available": all(self.availability.values()) if self.availability else None,
            "reaction_exists": self.reaction_exists,
            "reaction_valid": self.reaction_valid,
            "connected": self.connected,
            "valid": self.valid,
        }

    def to_dict(self) -> dict:
        d = {
            "index": self.index,
            **self.verdict_vector(),
            "invalid_molecules": list(self.invalid_molecules),
            "availability": dict(self.availability),
            "grounding": self.grounding,
            "grounded_reaction": self.grounded_reaction,
            "similarity": self.similarity,
            "template_id": self.template_id,
            "grounded_reactants": None if self.grounded_reactants is None else list(self.grounded_reactants),
            "rewritten_updated_set": None if self.rewritten_updated_set is None
            else list(self.rewritten_updated_set),
            "messages": list(self.messages),
        }
        return d


@dataclass
class EvaluationReport:
    target: str
    verdicts: list[StepVerdict]
    first_invalid_step: int | None
    frontier: tuple[str, ...]
    solved: bool
    start_set: tuple[str, ...]  # set the first invalid step should have started from

    @property
    def n_invalid(self) -> int:
        return sum(1 for v in self.verdicts if not v.valid)

    def frontier_molecules(self) -> list[Molecule]:
        out = []
        for s in self.frontier:
            try:
                out.append(parse_smiles(s))
            except ParseError:
                pass
        return out

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "solved": self.solved,
            "first_invalid_step": self.first_invalid_step,
            "frontier": list(self.frontier),
            "start_set": list(self.start_set),
            "steps": [v.to_dict() for v in self.verdicts],
        }


def _multiset(items: Iterable[str]) -> Counter:
    return Counter(items)


def _sorted_tuple(c: Counter) -> tuple[str, ...]:
    return tuple(sorted(c.elements()))


def evaluate_route(route: Route, stock: Stock, db: ReactionDatabase,
                   templates: TemplateLibrary | None = None) -> EvaluationReport:
    """Check each step for molecule validity, reaction existence/validity and connectivity.

    A step's reaction is grounded against known reactions; the grounded
    reactants become the step's rewritten updated set.  The following step
    may start from either the declared or the rewritten set.
    """
    cache: dict[str, str | None] = {}

    def canon(s: str) -> str | None:
        if s not in cache:
            cache[s] = _canon_or_none(s)
        return cache[s]

    target = canon(route.target) or route.target
    acceptable: list[tuple[str, ...]] = [(target,)]
    verdicts: list[StepVerdict] = []
    first_invalid: int | None = None
    start_set: tuple[str, ...] = (target,)
    last_effective: tuple[str, ...] = (target,)

    for k, step in enumerate(route.steps):
        v = StepVerdict(index=k, molecule_valid=True, expected_sets=tuple(acceptable))
        members = list(step.molecule_set) + [step.product] + list(step.reactants) + list(step.updated_molecule_set)
        bad = tuple(dict.fromkeys(s for s in members if canon(s) is None))
        if not step.product:
            bad = bad + ("<empty product>",)
        v.molecule_valid = not bad
        v.invalid_molecules = bad
        if bad:
            v.messages.append("invalid SMILES: " + ", ".join(bad))

        product = canon(step.product) if step.product else None
        declared_reactants = [canon(s) for s in step.reactants]
        declared_ok = bool(declared_reactants) and all(declared_reactants)
        ms = [canon(s) for s in step.molecule_set]
        ms_ok = all(ms)
        upd = [canon(s) for s in step.updated_molecule_set]
        upd_ok = all(upd)

        # reaction level
        grounded: tuple[str, ...] | None = None
        if product is not None:
            pmol = parse_smiles(product)
            try:
                outcome = ground_reaction(step.reaction, pmol, db, templates)
            except ParseError:
                outcome = NonExistent()
                v.messages.append(f"reaction {step.reaction!r} could not be parsed")
            v.grounding = outcome.kind
            v.reaction_exists = not isinstance(outcome, NonExistent)
            if isinstance(outcome, (Exact, Similar)):
                v.grounded_reaction = outcome.record.rsmi
                v.template_id = outcome.record.template_id
                if isinstance(outcome, Similar):
                    v.similarity = outcome.similarity
                sets = grounded_reactant_sets(outcome, pmol, templates)
                if sets:
                    want = tuple(sorted(declared_reactants)) if declared_ok else None
                    if want in sets:
                        grounded = want
                    elif outcome.record.reactants in sets:
                        grounded = outcome.record.reactants
                    else:
                        grounded = sets[0]
                    v.reaction_valid = True
                    v.grounded_reactants = grounded
                    if want is not None and grounded != want:
                        v.messages.append("grounded reaction gives reactants " + ".".join(grounded))
                else:
                    v.reaction_valid = False
                    v.messages.append(f"grounded reaction does not apply to product {product}")
            else:
                v.messages.append("no matching reaction found in the reaction database")

        # route level
        rewritten: tuple[str, ...] | None = None
        if ms_ok and product is not None:
            base = _multiset(ms)
            if product in base:
                rest = base.copy()
                rest[product] -= 1
                if grounded is not None:
                    rewritten = _sorted_tuple(rest + _multiset(grounded))
                v.rewritten_updated_set = rewritten
                in_set = True
            else:
                in_set = False
                rest = None
            if upd_ok:
                starts_ok = _multiset(ms) in [_multiset(a) for a in acceptable]
                options = []
                if rest is not None and declared_ok:
                    options.append(rest + _multiset(declared_reactants))
                if rest is not None and grounded is not None:
                    options.append(rest + _multiset(grounded))
                updated_ok = _multiset(upd) in options
                v.connected = in_set and starts_ok and updated_ok
                if not in_set:
                    v.messages.append(f"product {product} is not in the molecule set")
                if not starts_ok:
                    v.messages.append("molecule set does not match the previous updated set")
                if in_set and not updated_ok:
                    v.messages.append("updated molecule set is not the molecule set minus the product plus the reactants")
        effective = rewritten if rewritten is not None else (
            tuple(sorted(upd)) if upd_ok else ())
        for s in effective:
            v.availability.setdefault(s, s in stock.smiles)

        if first_invalid is None and not v.valid:
            first_invalid = k
            start_set = tuple(acceptable[-1])
        verdicts.append(v)
        nxt = []
        if upd_ok:
            nxt.append(tuple(sorted(upd)))
        if rewritten is not None and rewritten not in nxt:
            nxt.append(rewritten)
        acceptable = nxt or [()]
        if first_invalid is None:
            last_effective = effective

    if first_invalid is not None:
        st = route.steps[first_invalid]
        frontier = tuple(canon(s) or s for s in st.molecule_set)
        solved = False
    else:
        frontier = last_effective if route.steps else (target,)
        start_set = frontier
        solved = all(s in stock.smiles for s in frontier)
    return EvaluationReport(route.target, verdicts, first_invalid, frontier, solved, start_set)
