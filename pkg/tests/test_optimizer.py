import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lfalloc.errors import ConvergenceError, InfeasibleError, InputError
from lfalloc.grid import ConfidenceGrid, SaiGridDims, build_scan_order, plateau_confidence
from lfalloc.metrics import smoothness_penalty, combined_target, weighted_mse
from lfalloc.optimizer import (PER_GOP, AllocationProblem, SpStructure, StepBObjective, brute_force_oracle,
                               build_difference_matrix, build_pair_weights, kkt_residual, linearize, predict_target,
                               project_simplex, solve_step_a, solve_step_b, solve_two_step, tangent)


def test_difference_matrix_rows():
    diff_matrix = build_difference_matrix(2)
    assert diff_matrix[1].tolist() == [1, -1]
    assert diff_matrix[2].tolist() == [-1, 1]
    assert not diff_matrix[0].any() and not diff_matrix[3].any()


def test_pair_weights_examples():
    scan = build_scan_order("custom", SaiGridDims(2, 2), 2, _mapping([(1, 1), (1, 2)]))
    assert build_pair_weights(scan, np.ones((2, 2)), 2)[1] == 2
    scan = build_scan_order("custom", SaiGridDims(2, 2), 2, _mapping([(1, 1), (2, 2)]))
    assert build_pair_weights(scan, [[1, 1], [1, 0.5]], 2)[1] == 0.25
    scan = build_scan_order("custom", SaiGridDims(1, 3), 2, _mapping([(1, 1), (1, 3)]))
    assert build_pair_weights(scan, np.ones((1, 3)), 2)[1] == 0


def _mapping(cells):
    import io
    return io.StringIO("".join(f"{i + 1},{k},{l}\n" for i, (k, l) in enumerate(cells)))


@given(st.integers(1, 5), st.integers(1, 5), st.sampled_from(["raster", "snake", "spiral"]), st.integers(0, 2**31))
@settings(max_examples=60)
def test_sparse_dense_and_grid_penalty_agree(rows, cols, kind, seed):
    rng = np.random.default_rng(seed)
    scan = build_scan_order(kind, SaiGridDims(rows, cols))
    confs = rng.random((rows, cols))
    d = rng.random(rows * cols) * 50
    sp = SpStructure.from_scan(scan, confs)
    diff_matrix, pair_weights = sp.dense()
    v = diff_matrix @ d
    dense = float(v @ (pair_weights * v))
    assert np.array_equal(pair_weights, build_pair_weights(scan, confs, rows * cols))
    assert sp.penalty(d) == pytest.approx(dense, rel=1e-12, abs=1e-12)
    assert sp.penalty(d) == pytest.approx(smoothness_penalty(scan.to_grid(d), confs), rel=1e-12, abs=1e-12)


def test_step_a_symmetry():
    p = AllocationProblem([2.0, 2.0], [-0.7, -0.7], [1.0, 1.0], 10.0)
    assert np.allclose(solve_step_a(p).x, [5, 5], rtol=1e-12)


def test_step_a_hand_instance():
    p = AllocationProblem([1.0, 1.0], [-1.0, -1.0], [1.0, 4.0], 3.0)
    sol = solve_step_a(p)
    assert np.allclose(sol.x, [1, 2], atol=1e-9)
    assert sol.objective == pytest.approx(3.0, abs=1e-9)
    assert sol.kkt_residual <= 1e-8


def test_zero_weight_goes_to_floor():
    p = AllocationProblem([1.0, 1.0, 1.0], [-1.0, -1.0, -1.0], [1.0, 0.0, 2.0], 1000.0)
    x = solve_step_a(p).x
    assert x[1] == p.floor
    assert x.sum() == pytest.approx(1000.0, rel=1e-12)


problems = st.integers(1, 6).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0.1, 100), min_size=n, max_size=n),
    st.lists(st.floats(-2, -0.2), min_size=n, max_size=n),
    st.lists(st.floats(0, 1), min_size=n, max_size=n),
    st.floats(100, 1e7)))


@given(problems)
def test_step_a_kkt_and_budget(args):
    coefficient, exponent, confs, budget = args
    p = AllocationProblem(coefficient, exponent, confs, budget)
    sol = solve_step_a(p)
    assert sol.x.sum() == pytest.approx(budget, rel=1e-9)
    assert np.all(sol.x >= p.floor)
    assert sol.kkt_residual <= 1e-6


def test_infeasible_floor():
    with pytest.raises(InfeasibleError):
        AllocationProblem([1.0, 1.0, 1.0], [-1.0] * 3, [1.0] * 3, 2.5)


def test_nonconvex_model_rejected():
    with pytest.raises(InputError):
        AllocationProblem([1.0], [0.2], [1.0], 10.0)


@pytest.mark.parametrize("coefficient,exponent,point,slope,value", [(2, -1, 1, -2, 2), (1, -1, 2, -0.25, 0.5)])
def test_tangent_examples(coefficient, exponent, point, slope, value):
    c, s = tangent(coefficient, exponent, point)
    assert s == slope
    assert c + s * point == value


@given(st.floats(0.1, 100), st.floats(-3, -0.01), st.floats(1, 1e6))
def test_tangency(coefficient, exponent, point):
    c, s = tangent(coefficient, exponent, point)
    assert c + s * point == pytest.approx(coefficient * point ** exponent, rel=1e-12)
    h = point * 1e-6
    num = coefficient * ((point + h) ** exponent - (point - h) ** exponent) / (2 * h)
    assert s == pytest.approx(num, rel=1e-5)
    assert s < 0 < c


def test_tangent_rejects_nonpositive_point():
    with pytest.raises(InputError):
        tangent(1.0, -1.0, 0.0)


def chain_problem(n=4, smooth_weight=0.0, budget=1e4, seed=0):
    rng = np.random.default_rng(seed)
    scan = build_scan_order("raster", SaiGridDims(1, n))
    confs = rng.random((1, n))
    conf = ConfidenceGrid(confs)
    sp = SpStructure.from_scan(scan, conf)
    return AllocationProblem(rng.uniform(1e2, 1e3, n), rng.uniform(-1.5, -0.5, n), confs[0] ** 2, budget, smooth_weight, sp,
                             n_sai=n)


def test_step_b_lambda_zero_returns_step_a():
    p = chain_problem()
    a = solve_step_a(p)
    b = solve_step_b(p, linearize(p, a.x), a)
    assert np.allclose(a.x, b.x, rtol=1e-9)


def test_step_b_equalises_with_large_lambda():
    p = AllocationProblem([10.0, 10.0], [-1.0, -1.0], [1.0, 0.1], 100.0, 0.0,
                          SpStructure(2, np.array([0, 1]), np.array([1, 0]), np.array([2.0, 2.0])))
    a = solve_step_a(p)
    lin = linearize(p, a.x)
    gap0 = abs(np.diff(lin(a.x))[0])
    b = solve_step_b(p.with_lambda(50.0), lin, a)
    assert abs(np.diff(lin(b.x))[0]) < gap0
    # 2000 x 2000 style check along the 1-D simplex
    obj = StepBObjective(p.with_lambda(50.0), lin)
    grid = np.linspace(p.floor, 100 - p.floor, 4001)
    points = np.stack([grid, 100 - grid], axis=1)
    vals = obj(points)
    assert b.objective <= vals.min() + 1e-9 * abs(vals.min())


@given(st.integers(0, 10_000), st.floats(0.5, 8))
@settings(max_examples=30)
def test_step_b_improves_on_step_a(seed, smooth_weight):
    p = chain_problem(smooth_weight=smooth_weight, seed=seed)
    a, lin, b = solve_two_step(p)
    obj = StepBObjective(p, lin)
    assert b.objective <= float(obj(a.x)) * (1 + 1e-12)
    assert b.x.sum() == pytest.approx(p.budget, rel=1e-9)
    assert np.all(b.x >= p.floor * (1 - 1e-12))


@given(st.integers(0, 10_000))
@settings(max_examples=25)
def test_linearised_sp_non_increasing_in_lambda(seed):
    p = chain_problem(n=5, seed=seed)
    a = solve_step_a(p)
    lin = linearize(p, a.x)
    values = []
    for smooth_weight in (0.0, 2.0, 4.0):
        b = solve_step_b(p.with_lambda(smooth_weight), lin, a)
        values.append(p.sp.penalty(lin(b.x)))
    assert values[1] <= values[0] * (1 + 1e-6) + 1e-9
    assert values[2] <= values[1] * (1 + 1e-6) + 1e-9


@given(st.integers(0, 10_000))
@settings(max_examples=20)
def test_step_b_objective_midpoint_convex(seed):
    rng = np.random.default_rng(seed)
    p = chain_problem(smooth_weight=3.0, seed=seed)
    obj = StepBObjective(p, linearize(p, solve_step_a(p).x))
    for _ in range(100):
        x = project_simplex(rng.random(4) * p.budget, p.budget, p.floor)
        y = project_simplex(rng.random(4) * p.budget, p.budget, p.floor)
        assert obj((x + y) / 2) <= (obj(x) + obj(y)) / 2 + 1e-12 * abs(obj(x) + obj(y))


def test_convergence_error_carries_best():
    p = chain_problem(n=6, smooth_weight=4.0, seed=3)
    a = solve_step_a(p)
    with pytest.raises(ConvergenceError) as err:
        solve_step_b(p, linearize(p, a.x), a, max_iter=1)
    assert err.value.best is not None and err.value.best.x.shape == (6,)


def test_project_simplex():
    x = project_simplex(np.array([5.0, -3.0, 1.0]), 4.0, 0.5)
    assert x.sum() == pytest.approx(4.0) and x.min() >= 0.5


def test_oracle_hand_instance_and_caps():
    p = AllocationProblem([1.0, 1.0], [-1.0, -1.0], [1.0, 4.0], 3.0)
    x, val = brute_force_oracle(p.exact_objective, 3.0, 2, 300)
    assert np.allclose(x, [1, 2], atol=3.0 / 300)
    assert val >= solve_step_a(p).objective - 1e-12
    with pytest.raises(InputError):
        brute_force_oracle(p.exact_objective, 3.0, 5, 10)
    with pytest.raises(InputError):
        brute_force_oracle(p.exact_objective, 3.0, 2, 401)


def test_oracle_four_dimensions():
    p = AllocationProblem([1.0, 2.0, 3.0, 4.0], [-1.0] * 4, [1.0] * 4, 10.0)
    x, val = brute_force_oracle(p.exact_objective, 10.0, 4, 40)
    assert x.sum() == pytest.approx(10.0)
    assert val >= solve_step_a(p).objective - 1e-12


def test_predict_T_examples():
    p = AllocationProblem([4.0] * 4, [-1.0] * 4, [0.25] * 4, 8.0, 2.0,
                          SpStructure.from_scan(build_scan_order("raster", SaiGridDims(2, 2)), np.full((2, 2), 0.5)),
                          n_sai=4)
    assert predict_target(p, [2.0] * 4) == pytest.approx(0.25 * 4 * 2 ** -1)
    x = np.array([1.0, 2.0, 3.0, 2.0])
    d = p.distortion(x)
    scan = build_scan_order("raster", SaiGridDims(2, 2))
    grid, confs = scan.to_grid(d), np.full((2, 2), 0.5)
    assert predict_target(p, x) == pytest.approx(combined_target(weighted_mse(grid, confs), smoothness_penalty(grid, confs), 2.0, 4))
    with pytest.raises(InfeasibleError):
        predict_target(p, [4.0, 4.0, 4.0, 4.0])


def test_per_gop_problem_and_pinning():
    # 4 frames in 2 GOPs; the second GOP is pinned
    p = AllocationProblem([5.0, 5.0, 5.0, 5.0], [-1.0] * 4, [1.0, 1.0, 1.0, 1.0], 100.0,
                          frame_to_var=[0, 0, 1, 1], pinned=[False, True], variable_kind=PER_GOP)
    x = solve_step_a(p).x
    assert np.allclose(x, [50.0, 50.0])
    p2 = AllocationProblem([5.0, 5.0, 1.0, 1.0], [-1.0] * 4, [1.0] * 4, 100.0, frame_to_var=[0, 0, 1, 1])
    x2 = solve_step_a(p2).x
    # marginal gains equal: 10/x0^2 = 2/x1^2
    assert x2[0] / x2[1] == pytest.approx(math.sqrt(5), rel=1e-9)
    assert kkt_residual(p2, x2)[0] <= 1e-9


def test_problem_round_trip():
    p = chain_problem(smooth_weight=2.0)
    q = AllocationProblem.from_dict(p.to_dict())
    assert np.array_equal(p.coefficient, q.coefficient) and q.smooth_weight == 2.0
    assert np.array_equal(p.sp.pair_weights, q.sp.pair_weights)


def test_single_sai_grid_has_empty_structure():
    scan = build_scan_order("raster", SaiGridDims(1, 1))
    sp = SpStructure.from_scan(scan, plateau_confidence(1, 1))
    assert sp.is_empty
    p = AllocationProblem([1.0], [-1.0], [1.0], 10.0, 4.0, sp)
    a, _, b = solve_two_step(p)
    assert np.array_equal(a.x, b.x)


def test_stationarity_at_the_penalty_kink():
    # a large lambda drives the linearised distortions together, where the norm has no gradient
    scan = build_scan_order("raster", SaiGridDims(1, 2))
    p = AllocationProblem([4.0, 9.0], [-1.0, -1.0], [1.0, 0.2], 10.0, 50.0,
                          SpStructure.from_scan(scan, np.ones((1, 2))))
    a, lin, b = solve_two_step(p)
    obj = StepBObjective(p, lin)
    assert np.linalg.norm(obj.residual(b.x)) <= 1e-9
    assert kkt_residual(p, b.x, obj.penalty_gradient(b.x))[0] > 1e-3
    assert obj.stationarity(b.x) <= 1e-6
    assert b.kkt_residual == obj.stationarity(b.x)
    # away from the kink the measure is the plain KKT spread
    q = p.with_lambda(0.01)
    a, lin, b = solve_two_step(q)
    obj = StepBObjective(q, lin)
    assert obj.stationarity(b.x) == pytest.approx(kkt_residual(q, b.x, obj.penalty_gradient(b.x))[0])
