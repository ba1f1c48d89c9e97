"""End-to-end acceptance checks, one test per criterion."""

from __future__ import annotations

import inspect
import json
import math
import random
import time
from fractions import Fraction

import pytest

from retroevo import cli, toy_dir
from retroevo.design import DEFAULT_SC_THRESHOLD, DesignConfig
from retroevo.evolve import PlannerConfig
from retroevo.molgraph import canonicalize, parse_smiles
from retroevo.proposer import DEFAULT_RETRIEVAL, ProposerConfig, load_script, retrieve_reference_routes
from retroevo.route import Route, evaluate_route, route_reward
from retroevo.search import (
    Expansion, ProposerPredictor, SearchConfig, TablePredictor, mcts_search, policy_priors, reaction_cost,
    retrostar_search, self_consistency, terminal_reward,
)
from retroevo.stock import Stock
from retroevo.template import RewriteValenceError, apply_backward, find_embeddings, rewrite

from .oracles import brute_embeddings, brute_frequencies, enumerate_route_costs, multisets, random_world
from .test_design import designer_run
from .test_evolve import run
from .test_route import AMIDE_STEP, BOC_STEP, FIXTURES, REWARD_FIXTURES, SCORES, STOCK, T, fixed_scorer, vector
from .test_template import small_molecules

criterion = pytest.mark.criterion


@criterion(1, "canonical SMILES fixed point, permutation invariance, < 10 s")
def test_canonicalizer(corpus):
    assert len(corpus) >= 200
    rng = random.Random(1)
    start = time.perf_counter()
    for s in corpus:
        c = canonicalize(s)
        assert canonicalize(c) == c, s
        m = parse_smiles(s)
        perm = list(range(len(m.atoms)))
        for _ in range(1000):
            rng.shuffle(perm)
            assert m.relabel(perm).canonical_smiles == c, s
    elapsed = time.perf_counter() - start
    assert elapsed < 10, f"{elapsed:.1f} s for {len(corpus)} x 1000 permutations"


@criterion(2, "template application equals brute-force embedding enumeration, < 30 s")
def test_template_engine(corpus, template_corpus, planner_world):
    mols = small_molecules(corpus, planner_world.targets)
    start = time.perf_counter()
    pairs = 0
    for t in template_corpus:
        for m in mols:
            brute = brute_embeddings(t.product, m)
            assert set(find_embeddings(t.product, m, None)) == brute
            try:
                expected = {tuple(x.canonical_smiles for x in rewrite(t, m, e)) for e in brute}
            except RewriteValenceError:
                continue
            got = {tuple(x.canonical_smiles for x in s) for s in apply_backward(t, m, None)}
            assert got == expected, (t.id, m)
            pairs += 1
    assert pairs > 0
    assert time.perf_counter() - start < 30


@criterion(3, "Retro*-0 cost equals exhaustive minimum on 100 random worlds; cost constants")
def test_retrostar_optimality():
    assert reaction_cost(0.5) == pytest.approx(0.6931471805599453, abs=1e-15)
    res = retrostar_search("A", TablePredictor({}), lambda m: m == "A")
    assert res.solved and res.cost == 0.0
    rng = random.Random(20240601)
    for _ in range(100):
        table, stock, target = random_world(rng)
        predictor = TablePredictor({m: [Expansion(*x) for x in v] for m, v in table.items()})
        res = retrostar_search(target, predictor, stock.__contains__,
                               SearchConfig(algorithm="retrostar", iterations=100_000))
        want = enumerate_route_costs(target, table, stock)
        if math.isinf(want):
            assert not res.solved
        else:
            assert res.solved and abs(res.cost - want) <= 1e-9


@criterion(4, "MCTS solves the two-step world in >= 95/100 seeds; binary reward; uniform priors")
def test_mcts(twostep_world):
    w = twostep_world
    purch = w.stock.smiles.__contains__
    assert policy_priors([0.25] * 4) == pytest.approx([0.25] * 4)
    assert {terminal_reward([], purch), terminal_reward(["C(("], purch)} == {0.0, 1.0}
    wins = 0
    for seed in range(100):
        predictor = ProposerPredictor(load_script(toy_dir("twostep") / "search_script.json", seed=seed),
                                      w.templates, w.db, k=4)
        res = mcts_search(T, predictor, purch, SearchConfig(iterations=500, seed=seed))
        wins += res.solved and res.iterations <= 500
    assert wins >= 95


@criterion(5, "self-consistency p-values equal brute-force counts and sum to 1")
def test_self_consistency():
    for seq in multisets("abc", 8):
        preds = self_consistency(seq)
        assert {p.reaction: p.p for p in preds} == brute_frequencies(seq)
        assert sum((p.p for p in preds), Fraction(0)) == 1


@criterion(6, "route evaluator verdict vectors on 12 fixtures; availability gates only solved")
def test_route_evaluator(twostep_world):
    w = twostep_world
    assert len(FIXTURES) == 12
    full = Stock.from_smiles(list(w.stock.smiles) + ["NCc1ccccc1", "CC#N", "CC(=O)Cl"])
    for name, (steps, expected, first_invalid, solved) in FIXTURES.items():
        route = Route(T, tuple(steps))
        report = evaluate_route(route, w.stock, w.db, w.templates)
        assert [vector(v) for v in report.verdicts] == expected, name
        assert report.first_invalid_step == first_invalid and report.solved is solved, name
        empty = evaluate_route(route, Stock(), w.db, w.templates)
        rich = evaluate_route(route, full, w.db, w.templates)
        assert [v.valid for v in empty.verdicts] == [v.valid for v in rich.verdicts], name
        assert not empty.solved


@criterion(7, "reward hand arithmetic, monotone in non-purchasable molecules, solved => 0")
def test_reward(corpus, twostep_world):
    scorer = fixed_scorer(SCORES)
    for frontier, expected in REWARD_FIXTURES:
        assert route_reward(frontier, scorer, STOCK) == expected
    rng = random.Random(7)
    for _ in range(100):
        frontier = rng.sample(corpus, rng.randint(0, 5))
        assert route_reward(frontier + [rng.choice(corpus)]) < route_reward(frontier)
    w = twostep_world
    report = evaluate_route(Route(T, (AMIDE_STEP, BOC_STEP)), w.stock, w.db, w.templates)
    assert report.solved and route_reward(report.frontier, stock=w.stock) == 0.0


@criterion(8, "planner solves 10/10 toy targets in <= 20 calls, < 10 s, reproducible, monotone best F")
def test_planner_end_to_end(planner_world):
    w = planner_world
    assert len(w.targets) == 10
    start = time.perf_counter()
    first = [run(w, t, load_script(w.script), max_calls=20) for t in w.targets]
    elapsed = time.perf_counter() - start
    second = [run(w, t, load_script(w.script), max_calls=20) for t in w.targets]
    for a, b in zip(first, second):
        assert a.solved and a.calls <= 20
        assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)
        assert all(y >= x for x, y in zip(a.trace, a.trace[1:]))
    assert elapsed < 10


@criterion(9, "designer reaches isomers score 1.0 in <= 50 oracle calls; routes re-validate; SC <= 3.5")
def test_designer(designer_world):
    w = designer_world
    res = designer_run(w)
    assert res.top1.score == 1.0 and res.oracle_calls <= 50
    for e in res.archive:
        if e.synthesizable:
            assert evaluate_route(e.route, w.stock, w.db, w.templates).solved
        if e.origin != "seed":
            assert e.sc <= 3.5


@criterion(10, "defaults reproduce every stated constant")
def test_constant_defaults():
    assert ProposerConfig().temperature == 0.7
    assert DEFAULT_RETRIEVAL == 3 and PlannerConfig().n_o == 3
    assert inspect.signature(retrieve_reference_routes).parameters["n"].default == 3
    assert PlannerConfig().init_retrieval == "top"
    sc = SearchConfig()
    assert sc.policy_temperature == 3.0
    assert sc.value_constant == 0.5
    assert {terminal_reward(["A"], lambda m: True), terminal_reward(["A"], lambda m: False)} == {0.0, 1.0}
    assert sc.heuristic("anything") == 0.0
    assert DEFAULT_SC_THRESHOLD == 3.5 and DesignConfig().sc_threshold == 3.5
    assert PlannerConfig().time_limit == 3600.0 and sc.time_limit == 3600.0
    args = cli.build_parser().parse_args(["plan", "--target", "C", "--stock", "s.smi"])
    assert args.time_limit == 3600.0
