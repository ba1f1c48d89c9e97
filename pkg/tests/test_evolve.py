from __future__ import annotations

import json
import random

import pytest

from retroevo.evolve import (
    Candidate, DependencyError, PlannerConfig, run_planner, sample_parent, select_survivors,
)
from retroevo.proposer import ScriptedProposer, ScriptRule, load_script
from retroevo.route import EvaluationReport, Route, evaluate_route, route_to_block

from .test_route import AMIDE_STEP, BOC_STEP, T


def cand(reward, serial, n_invalid=0):
    verdicts = [type("V", (), {"valid": False})() for _ in range(n_invalid)]
    report = EvaluationReport("C", verdicts, None, (), False, ())
    return Candidate(Route("C"), report, reward, serial, 0, "init")


def test_sample_parent_single():
    rng = random.Random(0)
    only = cand(-3.0, 0)
    assert all(sample_parent([only], rng) is only for _ in range(100))


def test_sample_parent_prefers_high_reward():
    rng = random.Random(1)
    a, b = cand(0.0, 0), cand(-50.0, 1)
    hits = sum(sample_parent([a, b], rng) is a for _ in range(10_000))
    assert hits / 10_000 > 0.999


def test_sample_parent_equal_rewards():
    rng = random.Random(2)
    a, b = cand(-2.0, 0), cand(-2.0, 1)
    hits = sum(sample_parent([a, b], rng) is a for _ in range(10_000))
    assert abs(hits / 10_000 - 0.5) <= 0.02


def test_select_survivors_examples():
    cs = [cand(0.0, 0), cand(-2.0, 1), cand(-5.0, 2)]
    assert [c.serial for c in select_survivors(cs, 2)] == [0, 1]
    equal = [cand(-1.0, k) for k in range(4)]
    assert [c.serial for c in select_survivors(equal, 2)] == [0, 1]
    assert [c.serial for c in select_survivors([cand(-1.0, 0, 2), cand(-1.0, 1, 1)], 1)] == [1]
    parents = [cand(-4.0, 0), cand(-3.0, 1)]
    children = [cand(-1.0, 2), cand(-2.0, 3)]
    assert [c.serial for c in select_survivors(parents + children, 2)] == [2, 3]


def run(world, target, proposer, **kw):
    return run_planner(target, PlannerConfig(**kw), world.stock, world.templates, world.db, world.routes, proposer)


SOLVING = route_to_block(Route(T, (AMIDE_STEP, BOC_STEP)))
HALF = route_to_block(Route(T, (AMIDE_STEP,)))
BROKEN = route_to_block(Route(T, tuple([AMIDE_STEP.__class__((T,), "", T, "c1ccccc1>>C=C", ("C=C",), ("C=C",))])))


def test_immediate_solve(twostep_world):
    p = ScriptedProposer([SOLVING] * 3, repeat_last=True)
    res = run(twostep_world, T, p, n_c=3)
    assert res.solved and res.generations == 0
    assert res.calls == 3 == p.calls


def test_exhaustion_path(twostep_world):
    p = ScriptedProposer(rules=[ScriptRule("", [BROKEN], repeat=True)])
    cfg = dict(n_c=4, num_mutations=3, budget=5)
    res = run(twostep_world, T, p, **cfg)
    assert not res.solved
    assert res.generations == 5
    assert len(res.trace) == 6
    assert all(b >= a for a, b in zip(res.trace, res.trace[1:]))
    assert res.calls <= 4 + 5 * 3


def test_unparsable_proposals_degrade_to_placeholder(twostep_world):
    p = ScriptedProposer(rules=[ScriptRule("", ["no route at all"], repeat=True)])
    res = run(twostep_world, T, p, n_c=2, num_mutations=2, budget=2)
    assert not res.solved and res.population[0].origin == "placeholder"
    assert any(e["event"] == "skip" for e in res.log)


def test_proposer_failures_are_skipped(twostep_world):
    p = ScriptedProposer([HALF])  # runs dry after one answer
    res = run(twostep_world, T, p, n_c=2, num_mutations=2, budget=2)
    assert not res.solved
    assert sum(e["event"] == "skip" for e in res.log) >= 3


def test_two_step_world_solved_by_generation_two(twostep_world):
    w = twostep_world
    res = run(w, T, load_script(w.script), n_c=4, num_mutations=2, budget=5)
    assert res.solved and res.generations == 2
    best = res.routes[0].route
    assert [s.reaction for s in best.steps] == ["amide", "boc"]
    assert evaluate_route(best, w.stock, w.db, w.templates).solved


def test_call_ceiling(twostep_world):
    p = ScriptedProposer(rules=[ScriptRule("", [BROKEN], repeat=True)])
    res = run(twostep_world, T, p, n_c=4, num_mutations=3, budget=10, max_calls=9)
    assert res.calls == 9 == p.calls


def test_target_in_stock(twostep_world):
    res = run(twostep_world, "OCC", ScriptedProposer())
    assert res.solved and res.calls == 0


def test_missing_dependencies(twostep_world):
    with pytest.raises(DependencyError):
        run_planner(T, PlannerConfig(), twostep_world.stock, None, None, None, ScriptedProposer())


def test_planner_world_targets(planner_world):
    w = planner_world
    for t in w.targets:
        res = run(w, t, load_script(w.script), max_calls=20)
        assert res.solved, t
        assert res.calls <= 20
        for c in res.routes:
            assert evaluate_route(c.route, w.stock, w.db, w.templates).solved


def test_deterministic_and_parallel_invariant(planner_world):
    w = planner_world
    t = w.targets[-1]
    a = json.dumps(run(w, t, load_script(w.script), max_calls=20).to_dict(), sort_keys=True)
    b = json.dumps(run(w, t, load_script(w.script), max_calls=20).to_dict(), sort_keys=True)
    p = load_script(w.script)
    p.sequential = False
    c = json.dumps(run(w, t, p, max_calls=20, parallelism=4).to_dict(), sort_keys=True)
    assert a == b == c


def test_config_validation():
    for bad in (dict(n_c=0), dict(budget=-1), dict(time_limit=0), dict(init_retrieval="best")):
        with pytest.raises(ValueError):
            PlannerConfig(**bad)
