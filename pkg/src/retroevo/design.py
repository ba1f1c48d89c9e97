"""Synthesizable molecular design.

A proposer edits pairs of archived molecules into new candidates.  Candidates
that are unparsable, already archived or more complex than the SC threshold
are discarded before any oracle call; the rest are scored and handed to the
route planner so every archived molecule carries its synthesis route, if one
was found.
"""

from __future__ import annotations

import logging
import math
import random
import re
from dataclasses import dataclass, field
from typing import Callable

from .evolve import PlannerConfig, run_planner
from .molgraph import ElementCounts, Molecule, ParseError, hill_formula, molecular_formula, parse_formula, parse_smiles
from .proposer import Proposer, ProposerError, RouteDatabase, build_designer_prompt
from .route import ComplexityScorer, Route, evaluate_route, heuristic_sc_score
from .stock import Stock
from .template import ReactionDatabase, TemplateLibrary

log = logging.getLogger(__name__)

DEFAULT_SC_THRESHOLD = 3.5


class MissingMoleculeBlock(ValueError):
    pass


_MOL_RE = re.compile(r"<\s*MOLECULE\s*>(.*?)<\s*/\s*MOLECULE\s*>", re.S | re.I)


def parse_molecule_block(text: str) -> Molecule:
    m = _MOL_RE.search(text or "")
    if m is None:
        raise MissingMoleculeBlock("no <MOLECULE> block found")
    return parse_smiles(m.group(1).strip().strip("'\"`"))


class Oracle:
    """Deterministic molecule -> [0, 1] score with an exact call counter."""

    def __init__(self, name: str, fn: Callable[[Molecule], float], description: str = ""):
        self.name = name
        self.fn = fn
        self.description = description
        self.calls = 0

    def __call__(self, m: Molecule) -> float:
        self.calls += 1
        return self.fn(m)


def formula_distance(formula: ElementCounts, m: Molecule) -> int:
    """Sum of squared per-element count differences."""
    counts = molecular_formula(m)
    return sum((counts.get(e, 0) - formula.get(e, 0)) ** 2 for e in set(formula) | set(counts))


def isomers_score(formula: ElementCounts, m: Molecule) -> float:
    """Geometric mean over elements of exp(-d^2 / 2), d the count difference per element."""
    counts = molecular_formula(m)
    elements = set(formula) | set(counts)
    total = sum((counts.get(e, 0) - formula.get(e, 0)) ** 2 for e in elements)
    return math.exp(-total / (2 * len(elements)))


def isomers_oracle(formula: ElementCounts | str) -> Oracle:
    if isinstance(formula, str):
        formula = parse_formula(formula)
    formula = {e: c for e, c in formula.items() if c > 0}
    if not formula:
        raise ValueError("formula is empty")
    text = hill_formula(formula)
    return Oracle(f"isomers_{text}", lambda m: isomers_score(formula, m),
                  f"The score measures how closely a molecule's formula matches {text}; "
                  f"1.0 means an exact isomer of {text}.")


def make_oracle(spec: str) -> Oracle:
    kind, _, arg = spec.partition(":")
    if kind == "isomers" and arg:
        return isomers_oracle(arg)
    raise ValueError(f"unknown oracle spec {spec!r}; expected isomers:<formula>")


@dataclass
class DesignConfig:
    oracle: str = "isomers:C9H10N2O2PF2Cl"
    population_size: int = 4
    max_rounds: int = 200
    oracle_budget: int = 50
    sc_threshold: float = DEFAULT_SC_THRESHOLD
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    plan_mode: str = "every_round"  # or "final"
    stop_at_perfect: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 1.0 <= self.sc_threshold <= 5.0:
            raise ValueError("sc threshold must lie in [1, 5]")
        if self.population_size < 1:
            raise ValueError("population size must be >= 1")
        if self.oracle_budget < self.population_size:
            raise ValueError("oracle budget must cover the seed population")
        if self.plan_mode not in ("every_round", "final"):
            raise ValueError("plan_mode must be 'every_round' or 'final'")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["planner"] = self.planner.to_dict()
        return d


@dataclass
class ArchiveEntry:
    smiles: str
    score: float
    round: int
    origin: str
    sc: float
    route: Route | None = None
    planned: bool = False

    @property
    def synthesizable(self) -> bool:
        return self.route is not None

    def to_dict(self) -> dict:
        return {"smiles": self.smiles, "score": self.score, "round": self.round, "origin": self.origin,
                "sc": self.sc, "synthesizable": self.synthesizable,
                "route": None if self.route is None else self.route.to_dict()}


@dataclass
class DesignResult:
    top1: ArchiveEntry | None
    archive: list[ArchiveEntry]
    oracle_calls: int
    proposer_calls: int
    rounds: int
    rejected: list[dict]
    trace: list[float]

    def to_dict(self) -> dict:
        return {
            "top1": None if self.top1 is None else self.top1.to_dict(),
            "oracle_calls": self.oracle_calls,
            "proposer_calls": self.proposer_calls,
            "rounds": self.rounds,
            "top1_trace": list(self.trace),
            "rejected": list(self.rejected),
            "archive": [e.to_dict() for e in self.archive],
        }


def _pick_parents(archive: list[ArchiveEntry], rng: random.Random) -> list[ArchiveEntry]:
    if len(archive) == 1:
        return [archive[0], archive[0]]
    weights = [max(e.score, 0.0) for e in archive]
    idx = list(range(len(archive)))
    if sum(weights) <= 0:
        return [archive[i] for i in rng.sample(idx, 2)]
    first = rng.choices(idx, weights=weights)[0]
    rest = [i for i in idx if i != first]
    rw = [weights[i] for i in rest]
    second = rng.choices(rest, weights=rw)[0] if sum(rw) > 0 else rng.choice(rest)
    return [archive[first], archive[second]]


def run_designer(config: DesignConfig, stock: Stock, templates: TemplateLibrary | None,
                 reaction_db: ReactionDatabase, route_db: RouteDatabase | None, proposer: Proposer,
                 oracle: Oracle | None = None, planner_proposer: Proposer | None = None,
                 scorer: ComplexityScorer = heuristic_sc_score) -> DesignResult:
    rng = random.Random(config.seed)
    oracle = oracle or make_oracle(config.oracle)
    planner_proposer = planner_proposer or proposer
    formula = None
    if config.oracle.startswith("isomers:"):
        formula = parse_formula(config.oracle.partition(":")[2])
    start_calls = oracle.calls
    archive: list[ArchiveEntry] = []
    seen: set[str] = set()
    rejected: list[dict] = []
    trace: list[float] = []
    proposer_calls = 0

    def used() -> int:
        return oracle.calls - start_calls

    def plan(entries: list[ArchiveEntry]):
        for e in entries:
            if e.planned:
                continue
            e.planned = True
            if e.smiles in stock.smiles:
                e.route = Route(e.smiles, (), "stock")
                continue
            res = run_planner(e.smiles, config.planner, stock, templates, reaction_db, route_db,
                              planner_proposer, scorer)
            if res.solved:
                route = res.routes[0].route
                if evaluate_route(route, stock, reaction_db, templates).solved:
                    e.route = route

    # seed population: the stock molecules closest to the formula
    pool = sorted(stock.smiles)
    if formula is not None:
        pool.sort(key=lambda s: (formula_distance(formula, parse_smiles(s)), s))
    for s in pool[:config.population_size]:
        m = parse_smiles(s)
        archive.append(ArchiveEntry(s, oracle(m), 0, "seed", scorer(m), Route(s, (), "stock"), True))
        seen.add(s)
    trace.append(max((e.score for e in archive), default=0.0))

    rounds = 0
    for rnd in range(1, config.max_rounds + 1):
        if used() >= config.oracle_budget or not archive:
            break
        if config.stop_at_perfect and trace[-1] >= 1.0:
            break
        rounds = rnd
        parents = _pick_parents(archive, rng)
        prompt = build_designer_prompt([(p.smiles, p.score) for p in parents], oracle.description)
        proposer_calls += 1
        new: list[ArchiveEntry] = []
        try:
            text = proposer.propose(prompt)
            m = parse_molecule_block(text)
        except (ProposerError, MissingMoleculeBlock, ParseError) as exc:
            rejected.append({"round": rnd, "reason": f"{type(exc).__name__}: {exc}"})
            trace.append(trace[-1])
            continue
        smi = m.canonical_smiles
        sc = scorer(m)
        if smi in seen:
            rejected.append({"round": rnd, "smiles": smi, "reason": "duplicate"})
        elif sc > config.sc_threshold:
            rejected.append({"round": rnd, "smiles": smi, "reason": f"sc {sc:.3f} > {config.sc_threshold}"})
        else:
            seen.add(smi)
            entry = ArchiveEntry(smi, oracle(m), rnd, "proposal", sc)
            archive.append(entry)
            new.append(entry)
        if config.plan_mode == "every_round":
            plan(new)
        trace.append(max(trace[-1], max((e.score for e in new), default=0.0)))
    if config.plan_mode == "final":
        plan(archive)
    top = max(archive, key=lambda e: (e.score, e.synthesizable, -archive.index(e))) if archive else None
    return DesignResult(top, archive, used(), proposer_calls, rounds, rejected, trace)
