from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retroevo.molgraph import parse_smiles
from retroevo.route import (
    EmptyRoute, MissingRouteBlock, Route, RouteStep, StepSchemaError, evaluate_route, heuristic_sc_score,
    parse_route_block, route_reward, route_to_block,
)
from retroevo.stock import Stock

T = "CC(=O)NCc1ccccc1"
ACID = "CC(=O)O"
AMINE = "NCc1ccccc1"
BOC = "CC(C)(C)OC(=O)NCc1ccccc1"


def step(ms, product, reaction, reactants, updated):
    return RouteStep(tuple(ms), "", product, reaction, tuple(reactants), tuple(updated))


AMIDE_STEP = step([T], T, "amide", [ACID, AMINE], [ACID, AMINE])
BOC_STEP = step([ACID, AMINE], AMINE, "boc", [BOC], [ACID, BOC])

# verdict per step: (molecule_valid, available, reaction_exists, reaction_valid, connected, valid)
V = (True, True, True, True, True, True)
UNAVAILABLE = (True, False, True, True, True, True)

FIXTURES = {
    "solved_two_steps": ([AMIDE_STEP, BOC_STEP], [UNAVAILABLE, V], None, True),
    "unavailable_leaf": ([AMIDE_STEP], [UNAVAILABLE], None, False),
    "invalid_reactant": ([step([T], T, "amide", [ACID, "C(("], [ACID, "C(("])],
                         [(False, False, True, True, None, False)], 0, False),
    "invalid_molecule_set": ([AMIDE_STEP, step([ACID, "N(("], AMINE, "boc", [BOC], [ACID, BOC])],
                             [UNAVAILABLE, (False, True, True, True, None, False)], 1, False),
    "database_reaction": ([step([T], T, "CC(=O)O.NCc1ccccc1>>CC(=O)NCc1ccccc1", [ACID, AMINE], [ACID, AMINE]),
                           BOC_STEP], [UNAVAILABLE, V], None, True),
    "nonexistent_reaction": ([AMIDE_STEP, step([ACID, AMINE], ACID, "CC(=O)O>>CC#N.O", ["CC#N", "O"],
                                               [AMINE, "CC#N", "O"])],
                             [UNAVAILABLE, (True, False, False, None, True, False)], 1, False),
    "invalid_reaction": ([step([T], T, "boc", [BOC], [BOC])],
                         [(True, True, True, False, True, False)], 0, False),
    "disconnected_sets": ([AMIDE_STEP, step([ACID, "CCO"], "CCO", "boc", [BOC], [ACID, BOC])],
                          [UNAVAILABLE, (True, True, True, False, False, False)], 1, False),
    "product_not_in_set": ([AMIDE_STEP, step([ACID, AMINE], "NCCO", "boc", [BOC], [ACID, AMINE, BOC])],
                           [UNAVAILABLE, (True, False, True, True, False, False)], 1, False),
    "wrong_start": ([step([T, "CCO"], T, "amide", [ACID, AMINE], ["CCO", ACID, AMINE])],
                    [(True, False, True, True, False, False)], 0, False),
    "wrong_update": ([step([T], T, "amide", [ACID, AMINE], [ACID])],
                     [(True, False, True, True, False, False)], 0, False),
    "grounded_by_similarity": ([step([T], T, "CC(=O)Cl.NCc1ccccc1>>CC(=O)NCc1ccccc1", ["CC(=O)Cl", AMINE],
                                     ["CC(=O)Cl", AMINE]), BOC_STEP], [UNAVAILABLE, V], None, True),
}


def vector(v):
    d = v.verdict_vector()
    return (d["molecule_valid"], d["available"], d["reaction_exists"], d["reaction_valid"], d["connected"], d["valid"])


@pytest.mark.parametrize("name", sorted(FIXTURES))
def test_verdict_fixture(name, twostep_world):
    steps, expected, first_invalid, solved = FIXTURES[name]
    w = twostep_world
    report = evaluate_route(Route(T, tuple(steps)), w.stock, w.db, w.templates)
    assert [vector(v) for v in report.verdicts] == expected
    assert report.first_invalid_step == first_invalid
    assert report.solved is solved


def test_fixture_suite_covers_every_failure_category(twostep_world):
    seen = set()
    w = twostep_world
    for steps, *_ in FIXTURES.values():
        for v in evaluate_route(Route(T, tuple(steps)), w.stock, w.db, w.templates).verdicts:
            seen.update(v.failed_checks())
            if v.availability and not all(v.availability.values()):
                seen.add("availability")
    assert seen == {"molecule_validity", "availability", "reaction_existence", "reaction_validity", "connectivity"}
    assert len(FIXTURES) == 12


@pytest.mark.parametrize("name", sorted(FIXTURES))
def test_availability_never_changes_validity(name, twostep_world):
    w = twostep_world
    steps = FIXTURES[name][0]
    route = Route(T, tuple(steps))
    empty = evaluate_route(route, Stock(), w.db, w.templates)
    full_stock = Stock.from_smiles(list(w.stock.smiles) + [AMINE, "CC#N", "CC(=O)Cl"])
    full = evaluate_route(route, full_stock, w.db, w.templates)
    assert [v.valid for v in empty.verdicts] == [v.valid for v in full.verdicts]
    assert empty.first_invalid_step == full.first_invalid_step
    assert not empty.solved
    assert full.solved == (full.first_invalid_step is None)


def test_frontier_rules(twostep_world):
    w = twostep_world
    ok = evaluate_route(Route(T, (AMIDE_STEP, BOC_STEP)), w.stock, w.db, w.templates)
    assert sorted(ok.frontier) == sorted(parse_smiles(s).canonical_smiles for s in [ACID, BOC])
    steps = FIXTURES["disconnected_sets"][0]
    bad = evaluate_route(Route(T, tuple(steps)), w.stock, w.db, w.templates)
    assert sorted(bad.frontier) == sorted(parse_smiles(s).canonical_smiles for s in [ACID, "CCO"])
    assert sorted(bad.start_set) == sorted(parse_smiles(s).canonical_smiles for s in [ACID, AMINE])


def test_similar_grounding_rewrites_reactants(twostep_world):
    w = twostep_world
    steps = FIXTURES["grounded_by_similarity"][0]
    v = evaluate_route(Route(T, tuple(steps)), w.stock, w.db, w.templates).verdicts[0]
    assert v.grounding == "similar"
    assert sorted(v.grounded_reactants) == sorted(parse_smiles(s).canonical_smiles for s in [ACID, AMINE])


# --------------------------------------------------------------------------
# parsing

BLOCK = """Here is my plan.
<ROUTE>
[
    {
        'Molecule set': ['CC(=O)NCc1ccccc1'],
        'Rational': 'Amide disconnection.',
        'Product': ['CC(=O)NCc1ccccc1'],
        'Reaction': ['CC(=O)NCc1ccccc1>>CC(=O)O.NCc1ccccc1'],
        'Reactants': ['CC(=O)O', 'NCc1ccccc1'],
        'Updated molecule set': ['CC(=O)O', 'NCc1ccccc1'],
    },
    {
        'Molecule set': ['CC(=O)O', 'NCc1ccccc1'],
        'Rational': 'Remove the protecting group.',
        'Product': ['NCc1ccccc1'],
        'Reaction': ['boc'],
        'Reactants': ['CC(C)(C)OC(=O)NCc1ccccc1'],
        'Updated molecule set': ['CC(=O)O', 'CC(C)(C)OC(=O)NCc1ccccc1'],
    },
]
</ROUTE>
<EXPLANATION>Done.</EXPLANATION>"""


def test_parse_two_step_block():
    r = parse_route_block(BLOCK)
    assert len(r.steps) == 2
    assert r.target == T
    assert r.steps[0].reactants == (ACID, AMINE)
    assert r.steps[0].reaction == "CC(=O)NCc1ccccc1>>CC(=O)O.NCc1ccccc1"
    assert r.steps[1].updated_molecule_set == (ACID, BOC)


def test_parse_errors():
    with pytest.raises(MissingRouteBlock):
        parse_route_block("no route here")
    with pytest.raises(EmptyRoute):
        parse_route_block("<ROUTE></ROUTE>")
    broken = BLOCK.replace("'Reactants': ['CC(=O)O', 'NCc1ccccc1'],", "", 1)
    with pytest.raises(StepSchemaError) as info:
        parse_route_block(broken)
    assert (info.value.step, info.value.field) == (1, "reactants")


def test_block_round_trip():
    r = parse_route_block(BLOCK)
    again = parse_route_block(route_to_block(r))
    assert again.steps == r.steps
    assert parse_route_block(route_to_block(again)).steps == r.steps


# --------------------------------------------------------------------------
# reward


def fixed_scorer(table):
    return lambda m: table[m.canonical_smiles]


def C(s):
    return parse_smiles(s).canonical_smiles


SCORES = {C("CCO"): 2.5, C("c1ccccc1"): 3.5, C("CC(=O)O"): 1.25, C("CCN"): 4.0, C("O"): 1.0}
STOCK = Stock.from_smiles(["O", "CC(=O)O"])

REWARD_FIXTURES = [
    ([], 0.0),
    (["O"], 0.0),
    (["CCO", "c1ccccc1"], -6.0),
    (["CCO"], -2.5),
    (["CCO", "CCO"], -5.0),
    (["CCO", "O"], -2.5),
    (["CC(=O)O", "CCN", "O"], -4.0),
    (["CCN", "c1ccccc1", "CCO"], -10.0),
    (["C(("], -5.0),
    (["C((", "CCN", "O"], -9.0),
]


@pytest.mark.parametrize("frontier,expected", REWARD_FIXTURES)
def test_reward_hand_arithmetic(frontier, expected):
    assert route_reward(frontier, fixed_scorer(SCORES), STOCK) == expected


def test_reward_with_heuristic():
    assert route_reward([], stock=STOCK) == 0.0
    assert heuristic_sc_score(parse_smiles("C")) == pytest.approx(1.35)
    assert route_reward(["C", "O"], stock=STOCK) == pytest.approx(-1.35)


def test_solved_route_scores_zero(twostep_world):
    w = twostep_world
    report = evaluate_route(Route(T, (AMIDE_STEP, BOC_STEP)), w.stock, w.db, w.templates)
    assert report.solved
    assert route_reward(report.frontier, stock=w.stock) == 0.0
    # the converse does not hold: a purchasable frontier at an invalid step is unsolved
    steps = FIXTURES["invalid_reaction"][0]
    bad = evaluate_route(Route(T, tuple(steps)), Stock.from_smiles([T]), w.db, w.templates)
    assert not bad.solved and route_reward(bad.frontier, stock=Stock.from_smiles([T])) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=224), max_size=5), st.integers(min_value=0, max_value=224))
def test_adding_nonpurchasable_molecule_lowers_reward(corpus, idxs, extra):
    frontier = [corpus[i % len(corpus)] for i in idxs]
    assert route_reward(frontier + [corpus[extra % len(corpus)]]) < route_reward(frontier)


def test_sc_heuristic_properties(corpus):
    scores = [heuristic_sc_score(parse_smiles(s)) for s in corpus[:50]]
    assert all(1.0 <= s <= 5.0 for s in scores)
    assert 2.5 <= sum(scores) / len(scores) <= 4.5
    assert heuristic_sc_score(parse_smiles("C1CCCCC1")) >= heuristic_sc_score(parse_smiles("CCCCCC"))
    assert not math.isnan(heuristic_sc_score(parse_smiles("[Na+].[Cl-]")))
