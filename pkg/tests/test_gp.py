import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitqoe.gp import (OPERATIONS, PRIMITIVES, GpModel, GpParams, GpProgram, crossover,
                       draw_operation, evaluate_program, evolve, execute, fitness,
                       function_set, init_population, leaf_depths, mutate, program_depth,
                       subtree_end, tournament_select, validate)

from conftest import make_dataset

X3 = np.array([[1.0, 2.0, 0.0], [4.0, -9.0, 1e-9], [0.5, 0.25, -3.0]])


def test_function_set():
    assert function_set() == ("add", "sub", "mul", "div", "sqrt", "log", "abs", "neg",
                              "inv", "max", "min")
    assert function_set(False, False) == ("add", "sub", "mul", "div")


@pytest.mark.parametrize("nodes,expected", [
    (["add", 0, 1], [3.0, -5.0, 0.75]),
    (["sub", 0, 1.5], [-0.5, 2.5, -1.0]),
    (["mul", 0, 1], [2.0, -36.0, 0.125]),
    (["div", 0, 2], [1.0, 1.0, 0.5 / -3.0]),
    (["sqrt", 1], [math.sqrt(2), 3.0, 0.5]),
    (["log", 2], [0.0, 0.0, math.log(3.0)]),
    (["abs", 1], [2.0, 9.0, 0.25]),
    (["neg", 0], [-1.0, -4.0, -0.5]),
    (["inv", 2], [1.0, 1.0, -1 / 3.0]),
    (["max", 0, 1], [2.0, 4.0, 0.5]),
    (["min", 0, 1], [1.0, -9.0, 0.25]),
    ([0.7], [0.7, 0.7, 0.7]),
])
def test_protected_primitives(nodes, expected):
    np.testing.assert_allclose(execute(nodes, X3), expected)


def test_nested_program_and_single_row():
    nodes = ["add", "mul", 0, 0, "neg", 1]  # x0*x0 - x1
    np.testing.assert_allclose(execute(nodes, X3), X3[:, 0] ** 2 - X3[:, 1])
    assert evaluate_program(nodes, [3.0, 1.0, 0.0]) == 8.0


def test_unknown_feature_raises():
    with pytest.raises(IndexError):
        execute(["add", 0, 5], X3)


def test_structure_helpers():
    nodes = ["add", "mul", 0, 1, "neg", 0.5]
    assert subtree_end(nodes, 0) == 6
    assert subtree_end(nodes, 1) == 4
    assert subtree_end(nodes, 4) == 6
    assert program_depth(nodes) == 2
    assert program_depth([3]) == 0
    assert leaf_depths(nodes) == [2, 2, 2]
    validate(nodes, 2)
    with pytest.raises(ValueError):
        validate(["add", 0], 2)
    with pytest.raises(ValueError):
        validate(["add", 0, 4], 2)


def test_rendering():
    p = GpProgram(("add", 0, "mul", 1, 0.5))
    assert p.to_sexpr() == "(add X0 (mul X1 0.5))"
    assert "fps" in p.to_infix(["fps", "qp"])
    assert GpProgram.from_json(p.to_json()).nodes == p.nodes


def test_fitness_penalizes_length_and_nonfinite():
    X = np.array([[1.0], [2.0]])
    y = np.array([1.0, 2.0])
    raw, pen = fitness([0], X, y, 0.01)
    assert raw == 0.0 and pen == pytest.approx(0.01)
    raw, pen = fitness(["add", 0, 0.0], X, y, 0.01)
    assert pen == pytest.approx(0.03)
    Xbig = np.array([[1e300], [1e300]])
    assert fitness(["mul", 0, 0], Xbig, y) == (math.inf, math.inf)


def test_init_population_depths():
    params = GpParams(population_size=200, init_depth=(2, 4), seed=1)
    pop = init_population(params, 3)
    depths = {p.depth for p in pop}
    assert depths <= {2, 3, 4} and len(depths) == 3
    for p in pop:
        validate(p.nodes, 3)
        # full method: every leaf sits at the maximum depth
        assert set(leaf_depths(p.nodes)) == {p.depth}


def test_tournament_prefers_fitness_then_length():
    rng = np.random.default_rng(0)
    fit = np.array([3.0, 1.0, 1.0, 2.0])
    lengths = np.array([1, 9, 5, 1])
    assert tournament_select(fit, lengths, 4, rng, replace=False) == 2
    wins = [tournament_select(fit, lengths, 2, rng) for _ in range(2000)]
    counts = np.bincount(wins, minlength=4)
    assert counts[2] > counts[1] > counts[0] >= 0


programs = st.integers(0, 2**31 - 1).map(
    lambda s: init_population(GpParams(population_size=2, init_depth=(0, 5), seed=s), 3))


@given(programs, st.integers(0, 2**31 - 1))
@settings(max_examples=80, deadline=None)
def test_variation_keeps_programs_valid(pop, seed):
    rng = np.random.default_rng(seed)
    params = GpParams(max_depth=6)
    a, b = list(pop[0].nodes), list(pop[1].nodes)
    child = crossover(a, b, rng, params)
    validate(child, 3)
    assert program_depth(child) <= max(6, program_depth(a))
    for kind in ("subtree", "hoist", "point"):
        m = mutate(a, kind, params, 3, rng)
        validate(m, 3)
        if kind == "hoist":
            assert len(m) <= len(a)
        if kind == "point":
            assert len(m) == len(a)


def test_mutate_unknown_kind():
    with pytest.raises(ValueError):
        mutate([0], "nope", GpParams(), 1, np.random.default_rng())


@pytest.mark.parametrize("kw", [dict(p_crossover=0.99, p_hoist_mutation=0.05),
                                dict(population_size=0), dict(functions=("tan",)),
                                dict(init_depth=(3, 2)), dict(max_samples=0.0)])
def test_param_validation(kw):
    with pytest.raises(ValueError):
        GpParams(**kw)


def _sum_dataset(seed, n=50):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.5, 2.0, (n, 2))
    return make_dataset(X, X[:, 0] + X[:, 1])


def test_evolve_small_run_is_deterministic_and_logged():
    ds = _sum_dataset(0)
    p = GpParams(population_size=60, generations=5, seed=3)
    a, b = evolve(ds, p), evolve(ds, p)
    assert a.program.nodes == b.program.nodes
    assert [g.best_ever_fitness for g in a.log] == [g.best_ever_fitness for g in b.log]
    best = [g.best_ever_fitness for g in a.log]
    assert all(x >= y for x, y in zip(best, best[1:]))
    raw, pen = fitness(a.program, ds.X, ds.mos, p.parsimony_coefficient)
    assert (raw, pen) == (a.program.raw_fitness, a.program.fitness)


def test_evolve_stops_early_on_exact_fit():
    ds = _sum_dataset(1)
    model = evolve(ds, GpParams(population_size=300, generations=40, seed=0,
                                stopping_fitness=1e-9))
    if model.program.raw_fitness <= 1e-9:
        assert len(model.log) < 40
    np.testing.assert_allclose(model.predict(ds.X), execute(model.program.nodes, ds.X))


def test_gp_model_json_round_trip():
    ds = _sum_dataset(2)
    m = evolve(ds, GpParams(population_size=30, generations=2))
    back = GpModel.from_json(m.to_json())
    assert back.program.nodes == m.program.nodes
    np.testing.assert_array_equal(back.predict(ds.X), m.predict(ds.X))
    assert back.params == m.params


def test_all_primitives_registered():
    for name in function_set():
        assert PRIMITIVES[name].arity in (1, 2)


def test_best_ever_fitness_never_increases(small_ds):
    for seed in range(20):
        model = evolve(small_ds, GpParams(population_size=40, generations=8, seed=seed,
                                          tournament_size=4))
        best = [g.best_ever_fitness for g in model.log]
        assert all(b <= a for a, b in zip(best, best[1:]))
        assert model.program.fitness == best[-1]


def test_every_program_finite_on_training_rows(synth_ds):
    ds = synth_ds.take_columns(range(10))
    seen = []

    def check(gen, pop, scores):
        for p in pop:
            seen.append(np.all(np.isfinite(execute(p, ds.X))))

    evolve(ds, GpParams(population_size=60, generations=6, tournament_size=5), check)
    assert len(seen) == 360 and all(seen)


def test_operator_mix_within_three_sigma():
    params = GpParams()
    rng = np.random.default_rng(123)
    n = 100_000
    draws = [draw_operation(params, rng) for _ in range(n)]
    expected = {"crossover": 0.9, "subtree": 0.01, "hoist": 0.01, "point": 0.01,
                "reproduction": 0.07}
    assert set(expected) == set(OPERATIONS)
    for op, p in expected.items():
        assert abs(draws.count(op) - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_unreachable_stopping_fitness_runs_all_generations(small_ds):
    model = evolve(small_ds, GpParams(population_size=20, generations=7,
                                      tournament_size=3, stopping_fitness=-1.0))
    assert [g.generation for g in model.log] == list(range(7))
