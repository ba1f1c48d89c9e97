"""Evolutionary search over whole routes.

A population of proposed routes is evaluated and scored.  Each generation
samples parents with weight exp(F), asks the proposer to rewrite each
parent from its first invalid step, splices the answer onto the parent's
valid prefix and keeps the best ``n_c`` routes.
"""

from __future__ import annotations

import logging
import math
import random
import time
from dataclasses import dataclass, field
from typing import Sequence

from .molgraph import Molecule, ParseError, parse_smiles
from .proposer import (
    EmptyDatabase, Proposer, ProposerError, RouteDatabase, build_init_prompt, build_mutation_prompt,
    propose_many, render_feedback, retrieve_reference_routes,
)
from .route import (
    ComplexityScorer, EvaluationReport, Route, RouteFormatError, evaluate_route, heuristic_sc_score,
    parse_route_block, route_reward,
)
from .stock import Stock
from .template import ReactionDatabase, TemplateLibrary

log = logging.getLogger(__name__)


class DependencyError(RuntimeError):
    pass


@dataclass
class PlannerConfig:
    n_c: int = 10
    n_o: int = 3
    num_mutations: int = 5
    budget: int = 10  # generations
    max_calls: int | None = None
    time_limit: float = 3600.0
    parallelism: int = 1
    seed: int = 0
    init_retrieval: str = "top"  # or "sample"

    def __post_init__(self):
        if self.n_c < 1:
            raise ValueError("n_c must be >= 1")
        if self.n_o < 1:
            raise ValueError("n_o must be >= 1")
        if self.num_mutations < 0:
            raise ValueError("num_mutations must be >= 0")
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        if self.max_calls is not None and self.max_calls < 0:
            raise ValueError("max_calls must be >= 0")
        if not self.time_limit > 0:
            raise ValueError("time_limit must be > 0")
        if self.init_retrieval not in ("top", "sample"):
            raise ValueError("init_retrieval must be 'top' or 'sample'")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Candidate:
    route: Route
    report: EvaluationReport
    reward: float
    serial: int
    generation: int
    origin: str
    raw_text: str | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "serial": self.serial,
            "generation": self.generation,
            "origin": self.origin,
            "reward": self.reward,
            "solved": self.report.solved,
            "route": self.route.to_dict(),
            "report": self.report.to_dict(),
            "raw_text": self.raw_text,
        }


@dataclass
class PlannerResult:
    target: str
    solved: bool
    routes: list[Candidate]
    population: list[Candidate]
    calls: int
    generations: int
    trace: list[float]
    log: list[dict]
    elapsed: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "target": self.target,
            "solved": self.solved,
            "calls": self.calls,
            "generations": self.generations,
            "best_reward_trace": list(self.trace),
            "solved_routes": [c.to_dict() for c in self.routes],
            "population": [c.to_dict() for c in self.population],
        }
        if include_timing:
            d["elapsed"] = self.elapsed
        return d


def sample_parent(pop: Sequence[Candidate], rng: random.Random) -> Candidate:
    """Draw a member with weight exp(F); uniform if every weight underflows to 0."""
    if not pop:
        raise ValueError("empty population")
    weights = [math.exp(c.reward) if c.reward > -745 else 0.0 for c in pop]
    if sum(weights) <= 0:
        return pop[rng.randrange(len(pop))]
    return rng.choices(pop, weights=weights)[0]


def select_survivors(candidates: Sequence[Candidate], n_c: int) -> list[Candidate]:
    """Best ``n_c`` by F; ties go to fewer invalid steps, then earlier creation."""
    if not candidates:
        raise ValueError("nothing to select from")
    ranked = sorted(candidates, key=lambda c: (-c.reward, c.report.n_invalid, c.serial))
    return ranked[:n_c]


def _query_molecule(parent: Candidate, stock: Stock) -> Molecule | None:
    """Molecule that mutation references are retrieved for: the failing step's product,
    else the first unpurchasable frontier member."""
    k = parent.report.first_invalid_step
    names = []
    if k is not None:
        names.append(parent.route.steps[k].product)
    names += [s for s in parent.report.frontier if s not in stock.smiles]
    names.append(parent.route.target)
    for s in names:
        try:
            return parse_smiles(s)
        except ParseError:
            continue
    return None


def run_planner(target: str, config: PlannerConfig, stock: Stock, templates: TemplateLibrary | None,
                reaction_db: ReactionDatabase, route_db: RouteDatabase | None, proposer: Proposer,
                scorer: ComplexityScorer = heuristic_sc_score) -> PlannerResult:
    if stock is None or reaction_db is None or proposer is None:
        raise DependencyError("planner needs a stock, a reaction database and a proposer")
    start = time.monotonic()
    rng = random.Random(config.seed)
    target_mol = parse_smiles(target)
    target = target_mol.canonical_smiles
    serial = 0
    calls = 0
    run_log: list[dict] = []
    trace: list[float] = []

    def out_of_time() -> bool:
        return time.monotonic() - start >= config.time_limit

    def calls_left() -> int:
        return 10 ** 9 if config.max_calls is None else config.max_calls - calls

    def refs_for(query: Molecule, mode: str):
        if route_db is None or not len(route_db):
            return []
        try:
            return retrieve_reference_routes(query, route_db, config.n_o, mode, rng)
        except EmptyDatabase:
            return []

    def make(route: Route, generation: int, origin: str, raw: str | None) -> Candidate:
        nonlocal serial
        report = evaluate_route(route, stock, reaction_db, templates)
        reward = route_reward(report.frontier, scorer, stock)
        c = Candidate(route, report, reward, serial, generation, origin, raw)
        serial += 1
        return c

    def ask(prompts: list[str], generation: int) -> list:
        nonlocal calls
        prompts = prompts[:max(0, calls_left())]
        calls += len(prompts)
        answers = propose_many(proposer, prompts, config.parallelism)
        for i, a in enumerate(answers):
            if isinstance(a, ProposerError):
                run_log.append({"event": "skip", "generation": generation, "index": i,
                                "reason": f"{type(a).__name__}: {a}"})
        return answers

    def finish(pop: list[Candidate], generations: int) -> PlannerResult:
        solved = [c for c in pop if c.report.solved]
        return PlannerResult(target, bool(solved), solved, pop, calls, generations, trace, run_log,
                             time.monotonic() - start)

    def record(generation: int, pop: list[Candidate], n_new: int):
        best = pop[0].reward
        if trace and best < trace[-1]:
            raise AssertionError("best reward decreased between generations")
        trace.append(best)
        run_log.append({"event": "generation", "generation": generation, "best_reward": best,
                        "calls": calls, "population": len(pop), "offspring": n_new,
                        "solved": any(c.report.solved for c in pop)})

    # generation 0
    if target in stock.smiles:
        pop = [make(Route(target, (), "trivial"), 0, "trivial", None)]
        record(0, pop, 0)
        return finish(pop, 0)

    prompts = []
    fixed = refs_for(target_mol, "top") if config.init_retrieval == "top" else None
    for _ in range(config.n_c):
        refs = fixed if fixed is not None else refs_for(target_mol, "sample")
        prompts.append(build_init_prompt(target, refs))
    initial: list[Candidate] = []
    for i, text in enumerate(ask(prompts, 0)):
        if isinstance(text, ProposerError):
            continue
        try:
            route = parse_route_block(text, target=target, provenance="init")
        except RouteFormatError as exc:
            run_log.append({"event": "skip", "generation": 0, "index": i, "reason": f"unparsable: {exc}"})
            continue
        initial.append(make(route, 0, "init", text))
    if not initial:
        initial.append(make(Route(target, (), "placeholder"), 0, "placeholder", None))
    pop = select_survivors(initial, config.n_c)
    record(0, pop, len(initial))
    if pop[0].report.solved:
        return finish(pop, 0)

    generation = 0
    for generation in range(1, config.budget + 1):
        if out_of_time() or calls_left() <= 0:
            generation -= 1
            break
        plans = []
        for _ in range(config.num_mutations):
            parent = sample_parent(pop, rng)
            fb = render_feedback(parent.route, parent.report, stock)
            k = parent.report.first_invalid_step
            partial = parent.route.steps[k:] if k is not None else ()
            query = _query_molecule(parent, stock)
            refs = refs_for(query, "sample") if query is not None else []
            prompt = build_mutation_prompt(parent.report.start_set, partial, fb, refs)
            plans.append((parent, fb, prompt))
        answers = ask([p for _, _, p in plans], generation)
        offspring = []
        for (parent, fb, _), text in zip(plans, answers):
            if isinstance(text, ProposerError):
                continue
            try:
                proposal = parse_route_block(text, target=target, provenance="mutation")
            except RouteFormatError as exc:
                run_log.append({"event": "skip", "generation": generation, "parent": parent.serial,
                                "reason": f"unparsable: {exc}"})
                continue
            child = parent.route.with_steps(fb.prefix + proposal.steps, "mutation")
            offspring.append(make(child, generation, "mutation", text))
        pop = select_survivors(pop + offspring, config.n_c)
        record(generation, pop, len(offspring))
        if pop[0].report.solved:
            break
    return finish(pop, generation)
