from __future__ import annotations

import math

import pytest

from retroevo.design import (
    DesignConfig, MissingMoleculeBlock, isomers_oracle, isomers_score, make_oracle, parse_molecule_block,
    run_designer,
)
from retroevo.evolve import PlannerConfig
from retroevo.molgraph import ParseError, molecular_formula, parse_formula, parse_smiles
from retroevo.proposer import ScriptedProposer, ScriptRule, load_script
from retroevo.route import evaluate_route, heuristic_sc_score
from retroevo.stock import Stock
from retroevo.template import ReactionDatabase

FORMULA = "C9H10N2O2PF2Cl"
TARGET = "NC(COPCl)C(=O)Nc1ccc(F)c(F)c1"
STEROID = "C[C@]12CC[C@H]3[C@@H](CC=C4C[C@@H](O)CC[C@@]43C)[C@@H]1CC[C@@H]2O"


def test_exact_isomer_scores_one():
    m = parse_smiles(TARGET)
    assert molecular_formula(m) == parse_formula(FORMULA)
    assert isomers_oracle(FORMULA)(m) == 1.0


def test_one_element_off_by_one():
    m = parse_smiles("NC(COP(Cl)S)C(=O)Nc1ccc(F)c(F)c1")
    counts = molecular_formula(m)
    assert len(counts) == 8
    counts["C"] += 1
    assert isomers_score(counts, m) == pytest.approx(math.exp(-0.5) ** (1 / 8))
    assert isomers_score(counts, m) == pytest.approx(0.9394, abs=1e-4)


def test_methane_scores_low():
    assert isomers_oracle(FORMULA)(parse_smiles("C")) < 0.1


def test_oracle_counts_calls():
    o = make_oracle("isomers:" + FORMULA)
    for _ in range(3):
        o(parse_smiles("CCO"))
    assert o.calls == 3
    with pytest.raises(ValueError):
        make_oracle("qed")


def test_molecule_block():
    assert parse_molecule_block("<MOLECULE>CCO</MOLECULE>").canonical_smiles == parse_smiles("CCO").canonical_smiles
    with pytest.raises(MissingMoleculeBlock):
        parse_molecule_block("CCO")
    with pytest.raises(ParseError):
        parse_molecule_block("<MOLECULE>C((</MOLECULE>")


def test_config_validation():
    with pytest.raises(ValueError):
        DesignConfig(sc_threshold=6)
    with pytest.raises(ValueError):
        DesignConfig(population_size=5, oracle_budget=4)


def test_stock_molecule_matching_formula():
    stock = Stock.from_smiles([TARGET, "CCO", "c1ccccc1"])
    seen = []
    oracle = isomers_oracle(FORMULA)
    fn = oracle.fn
    oracle.fn = lambda m: seen.append(m.canonical_smiles) or fn(m)
    p = ScriptedProposer([f"<MOLECULE>{TARGET}</MOLECULE>"], repeat_last=True)
    res = run_designer(DesignConfig(population_size=2, oracle_budget=10), stock, None, ReactionDatabase(),
                       None, p, oracle)
    canon = parse_smiles(TARGET).canonical_smiles
    assert res.top1.smiles == canon and res.top1.score == 1.0
    assert res.top1.synthesizable and res.top1.route.steps == ()
    assert seen.count(canon) == 1


def test_filter_blocks_complex_proposals():
    assert heuristic_sc_score(parse_smiles(STEROID)) > 3.5
    stock = Stock.from_smiles(["CCO", "CC(=O)O", "c1ccccc1"])
    p = ScriptedProposer(rules=[ScriptRule("", [f"<MOLECULE>{STEROID}</MOLECULE>"], repeat=True)])
    cfg = DesignConfig(population_size=3, oracle_budget=10, max_rounds=5)
    res = run_designer(cfg, stock, None, ReactionDatabase(), None, p)
    assert res.oracle_calls == 3
    assert [e.origin for e in res.archive] == ["seed"] * 3
    assert res.rounds == 5 and len(res.rejected) == 5


def designer_run(world, **kw):
    cfg = DesignConfig(oracle=(world.path / "oracle.txt").read_text().strip(),
                       planner=PlannerConfig(n_c=2, num_mutations=1, budget=1), **kw)
    return run_designer(cfg, world.stock, world.templates, world.db, world.routes, load_script(world.script))


def test_designer_world(designer_world):
    w = designer_world
    res = designer_run(w)
    assert res.top1.score == 1.0 and res.oracle_calls <= 50
    assert res.top1.smiles == parse_smiles(TARGET).canonical_smiles
    assert len(res.top1.route.steps) == 1
    for e in res.archive:
        if e.synthesizable:
            assert evaluate_route(e.route, w.stock, w.db, w.templates).solved, e.smiles
        if e.origin != "seed":
            assert e.sc <= 3.5
    reasons = [r["reason"] for r in res.rejected]
    assert any(r.startswith("sc ") for r in reasons)
    assert any("MissingMoleculeBlock" in r for r in reasons)
    assert all(b >= a for a, b in zip(res.trace, res.trace[1:]))
    assert res.top1 is max(res.archive, key=lambda e: e.score)


def test_designer_final_planning_mode(designer_world):
    res = designer_run(designer_world, plan_mode="final")
    assert res.top1.score == 1.0 and res.top1.synthesizable
    assert all(e.planned for e in res.archive)


def test_designer_budget_respected(designer_world):
    res = designer_run(designer_world, oracle_budget=5)
    assert res.oracle_calls == 5
    assert res.top1.score < 1.0
