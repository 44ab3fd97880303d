import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from learncbba.oracle import (
    OptimalAssignment,
    OracleCache,
    SolverBudget,
    best_known,
    branch_and_bound,
    brute_force,
    check_assignment,
    root_bound,
    solve,
    solve_exact,
    total_distance,
)
from learncbba.world import generate_world, path_length

from conftest import make_world


def test_single_task_distance():
    w = make_world([[0, 0]], [[3, 4]])
    for sol in (solve_exact(w), brute_force(w), branch_and_bound(w)):
        assert sol.total_distance == pytest.approx(5.0, abs=1e-12)
        assert sol.routes == ((0,),)


def test_neighbouring_tasks_split():
    w = make_world([[0, 0], [10, 10]], [[1, 0], [10, 9]])
    sol = solve_exact(w)
    assert sol.routes == ((0,), (1,))
    assert sol.total_distance == pytest.approx(2.0, abs=1e-12)
    # every 2-partition and order by hand
    d = lambda a, b: math.dist(a, b)
    a0, a1, t0, t1 = (0, 0), (10, 10), (1, 0), (10, 9)
    options = [
        d(a0, t0) + d(a1, t1),
        d(a0, t1) + d(a1, t0),
        d(a0, t0) + d(t0, t1),
        d(a0, t1) + d(t1, t0),
        d(a1, t0) + d(t0, t1),
        d(a1, t1) + d(t1, t0),
    ]
    assert sol.total_distance == pytest.approx(min(options), abs=1e-12)


def test_one_agent_two_orders():
    w = make_world([[0, 0]], [[5, 0], [1, 0]])
    sol = brute_force(w)
    assert sol.routes == ((1, 0),)
    assert sol.total_distance == pytest.approx(5.0)


def test_brute_force_guard():
    w = generate_world(0, 2, (9, 9))
    with pytest.raises(ValueError):
        brute_force(w)


@given(seed=st.integers(0, 100_000), agents=st.integers(1, 4), cap=st.integers(1, 6))
def test_exact_methods_match_brute_force(seed, agents, cap):
    w = generate_world(seed, agents, (1, 6), (10.0, 50.0), capacity_rule=cap)
    ref = brute_force(w)
    for sol in (solve_exact(w), solve_exact(w, method="native")):
        assert sol.proof_of_optimality
        check_assignment(w, sol.routes)
        assert abs(sol.total_distance - ref.total_distance) <= 1e-9


@given(seed=st.integers(0, 100_000))
def test_three_agents_five_tasks(seed):
    w = generate_world(seed, 3, (5, 5))
    assert abs(solve_exact(w).total_distance - brute_force(w).total_distance) <= 1e-9


@given(seed=st.integers(0, 100_000), agents=st.integers(1, 4))
def test_root_bound_admissible(seed, agents):
    w = generate_world(seed, agents, (1, 7))
    assert root_bound(w) <= brute_force(w).total_distance + 1e-9


def test_assignment_invariants():
    w = generate_world(4, 5, (12, 16))
    for sol in (solve_exact(w), best_known(w)):
        check_assignment(w, sol.routes)
        assert sol.total_distance == pytest.approx(
            sum(path_length(w.agents[i], r, w) for i, r in enumerate(sol.routes)), abs=1e-9
        )


def test_best_known_upper_bound_and_gap():
    gaps = []
    for seed in range(500):
        w = generate_world(seed, int(1 + seed % 4), (2, 6), stream=9)
        exact = brute_force(w).total_distance
        heur = best_known(w)
        assert not heur.proof_of_optimality
        assert heur.total_distance >= exact - 1e-9
        gaps.append(heur.total_distance / exact - 1.0 if exact > 0 else 0.0)
    assert np.mean(np.array(gaps) <= 0.05) >= 0.95


def test_best_known_deterministic_given_seed():
    w = generate_world(8, 5, (20, 25))
    a = best_known(w, SolverBudget(seed=3))
    b = best_known(w, SolverBudget(seed=3))
    assert a == b


def test_budget_exhaustion_returns_incumbent():
    w = generate_world(1, 4, (14, 14))
    sol = solve_exact(w, SolverBudget(max_nodes=5), method="native")
    assert not sol.proof_of_optimality
    check_assignment(w, sol.routes)
    assert sol.total_distance >= solve_exact(w).total_distance - 1e-9


def test_solve_falls_back_above_threshold():
    w = generate_world(1, 3, (12, 12))
    sol = solve(w, SolverBudget(exact_threshold=5))
    assert not sol.proof_of_optimality and sol.method == "best_known"
    assert solve(w).proof_of_optimality


def test_binding_capacity_respected():
    w = make_world([[0, 0], [10, 10]], [[1, 0], [2, 0], [3, 0], [4, 0]], capacity=2)
    sol = solve_exact(w)
    assert all(len(r) <= 2 for r in sol.routes)
    assert abs(sol.total_distance - brute_force(w).total_distance) <= 1e-9


def test_budget_validation():
    with pytest.raises(ValueError):
        SolverBudget(max_nodes=0)


def test_cache_round_trip_and_skip(tmp_path):
    worlds = [generate_world(s, 2, (3, 5)) for s in range(6)]
    cache = OracleCache()
    assert cache.solve_missing(worlds, SolverBudget()) == 6
    cache.save(tmp_path / "c.jsonl", [w.id for w in worlds])
    back = OracleCache.load(tmp_path / "c.jsonl")
    assert len(back) == 6
    assert all(back[w.id] == cache[w.id] for w in worlds)
    assert back.solve_missing(worlds, SolverBudget()) == 0


def test_record_round_trip():
    w = generate_world(0, 3, (5, 6))
    sol = solve_exact(w)
    assert OptimalAssignment.from_record(sol.to_record(w.id)) == sol
    assert total_distance(w, sol.routes) == sol.total_distance
