from __future__ import annotations

import math
import random
import time
from fractions import Fraction

import pytest

from retroevo import toy_dir
from retroevo.molgraph import parse_smiles
from retroevo.proposer import SampledProposer, ScriptedProposer, load_script
from retroevo.route import evaluate_route
from retroevo.search import (
    Expansion, GroundedReaction, ProposerPredictor, SearchConfig, TablePredictor, brute_force_min_cost,
    extract_reaction, mcts_search, policy_priors, predict_single_step, reaction_cost, retrostar_search,
    self_consistency, terminal_reward,
)

from .oracles import brute_frequencies, enumerate_route_costs, multisets, random_world

T = parse_smiles("CC(=O)NCc1ccccc1").canonical_smiles


# --------------------------------------------------------------------------
# self-consistency


def test_self_consistency_exhaustive():
    """Every sequence (hence every multiset) of up to 8 samples over 3 reactions."""
    n = 0
    for seq in multisets("abc", 8):
        preds = self_consistency(seq)
        expected = brute_frequencies(seq)
        assert {p.reaction: p.p for p in preds} == expected
        assert sum(p.p for p in preds) == 1
        assert all(p.count == Fraction(p.p) * len(seq) for p in preds)
        n += 1
    assert n == sum(3 ** k for k in range(1, 9))


def test_self_consistency_ordering_and_errors():
    preds = self_consistency(["b", "a", "a", "c"])
    assert [p.reaction for p in preds] == ["a", "b", "c"]
    assert preds[0].probability == 0.5
    with pytest.raises(ValueError):
        self_consistency([], 0)
    with pytest.raises(ValueError):
        self_consistency(["a"], 2)


def test_extract_reaction():
    assert extract_reaction("<REACTION>[CCO>>CC=O]</REACTION>") == "CCO>>CC=O"
    assert extract_reaction("I suggest CCO>>CC=O here") == "CCO>>CC=O"
    assert extract_reaction("<reaction> amide </reaction>") == "amide"


def test_predict_single_step(twostep_world):
    w = twostep_world
    p = ScriptedProposer(["<REACTION>amide</REACTION>", "<REACTION>amide</REACTION>",
                          "<REACTION>boc</REACTION>", "nonsense"])
    preds = predict_single_step(parse_smiles(T), p, w.templates, w.db, k=4)
    # the boc template does not apply and the last answer is ungroundable
    assert len(preds) == 1
    assert preds[0].reaction == GroundedReaction("amide", tuple(sorted(["CC(=O)O", "c1ccc(cc1)CN"])))
    assert preds[0].p == 1
    assert p.calls == 4


# --------------------------------------------------------------------------
# Retro*-0


def test_retrostar_constants():
    assert reaction_cost(0.5) == pytest.approx(0.6931471805599453, abs=1e-15)
    assert reaction_cost(1.0) == 0.0
    assert reaction_cost(0.0) == -math.log(1e-5)
    assert SearchConfig().heuristic("anything") == 0.0
    # purchasable target: cost 0 without any expansion
    res = retrostar_search("A", TablePredictor({}), lambda m: m == "A")
    assert res.solved and res.cost == 0.0 and res.iterations == 0
    one = TablePredictor({"T": [Expansion("r", ("A", "B"), 0.5)]})
    res = retrostar_search("T", one, lambda m: m in "AB")
    assert res.cost == pytest.approx(math.log(2))


def test_retrostar_prefers_cheaper_route():
    table = {"T": [Expansion("long", ("X",), 0.9), Expansion("short", ("A",), 0.3)],
             "X": [Expansion("x", ("Y",), 0.9)], "Y": [Expansion("y", ("Z",), 0.1)]}
    res = retrostar_search("T", TablePredictor(table), lambda m: m in ("A", "Z"))
    assert res.solved and [e.label for _, e in res.reactions] == ["short"]
    assert res.cost == pytest.approx(-math.log(0.3))


def route_cost(res, floor=1e-5):
    return sum(reaction_cost(e.p, floor) for _, e in res.reactions)


def test_retrostar_matches_exhaustive_minimum():
    rng = random.Random(20240601)
    start = time.perf_counter()
    solved = 0
    for _ in range(100):
        table, stock, target = random_world(rng)
        predictor = TablePredictor({m: [Expansion(*x) for x in v] for m, v in table.items()})
        res = retrostar_search(target, predictor, stock.__contains__,
                               SearchConfig(algorithm="retrostar", iterations=100_000))
        want = enumerate_route_costs(target, table, stock)
        if math.isinf(want):
            assert not res.solved
            continue
        solved += 1
        assert res.solved
        assert abs(res.cost - want) <= 1e-9
        assert abs(route_cost(res) - want) <= 1e-9
        assert brute_force_min_cost(target, predictor, stock.__contains__) == pytest.approx(want, abs=1e-9)
        # the returned reactions form a connected route ending in stock
        open_ = [target]
        for product, e in res.reactions:
            open_.remove(product)
            open_ += [r for r in e.reactants if r not in stock]
        assert open_ == []
    assert solved >= 50
    assert time.perf_counter() - start < 60


# --------------------------------------------------------------------------
# MCTS


def test_symmetric_logits_give_uniform_priors():
    assert policy_priors([0.3, 0.3, 0.3]) == pytest.approx([1 / 3] * 3)
    assert policy_priors([1e-3] * 5, 3.0) == pytest.approx([0.2] * 5)


def test_priors_are_tempered():
    ps = [0.8, 0.2]
    got = policy_priors(ps, 3.0)
    raw = [p ** (1 / 3) for p in ps]
    assert got == pytest.approx([r / sum(raw) for r in raw])
    assert policy_priors(ps, 1.0) == pytest.approx(ps)


def test_terminal_reward_is_binary():
    rng = random.Random(5)
    seen = set()
    for _ in range(200):
        mols = [rng.choice("ABCD") for _ in range(rng.randint(0, 4))]
        r = terminal_reward(mols, lambda m: m in "AB")
        assert type(r) is float
        seen.add(r)
    assert seen == {0.0, 1.0}


def test_mcts_values_stay_in_unit_interval():
    table = {"T": [Expansion("a", ("X",), 0.5), Expansion("b", ("A",), 0.1)],
             "X": [Expansion("c", ("Y",), 1.0)]}
    res = mcts_search("T", TablePredictor(table), lambda m: m == "A",
                      SearchConfig(iterations=50, stop_at_first=False))
    assert res.solved and [e.label for _, e in res.reactions] == ["b"]


def test_mcts_two_step_world_in_95_of_100_seeds(twostep_world):
    w = twostep_world
    purch = w.stock.smiles.__contains__
    wins = 0
    for seed in range(100):
        proposer = load_script(toy_dir("twostep") / "search_script.json", seed=seed)
        assert isinstance(proposer, SampledProposer)
        predictor = ProposerPredictor(proposer, w.templates, w.db, k=4)
        res = mcts_search(T, predictor, purch, SearchConfig(iterations=500, seed=seed))
        if res.solved and res.iterations <= 500:
            assert [e.label for _, e in res.reactions] == ["amide", "boc"]
            assert evaluate_route(res.to_route(), w.stock, w.db, w.templates).solved
            wins += 1
    assert wins >= 95


def test_retrostar_on_two_step_world(twostep_world):
    w = twostep_world
    proposer = load_script(toy_dir("twostep") / "search_script.json", seed=0)
    res = retrostar_search(T, ProposerPredictor(proposer, w.templates, w.db), w.stock.smiles.__contains__)
    assert res.solved
    assert evaluate_route(res.to_route(), w.stock, w.db, w.templates).solved


def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(algorithm="bfs")
    with pytest.raises(ValueError):
        SearchConfig(policy_temperature=0)
