import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajdiff import problems
from trajdiff.problems import ProblemParams
from trajdiff.solver import SolveOptions, Status, solve, warm_start

FAR = np.array([[-0.9, 0.9], [-0.9, -0.9], [0.9, -0.9], [0.9, -0.5]])


def _solved(task, seed, opts=None):
    rng = np.random.default_rng(seed)
    y = problems.sample_problem(task, rng).to_array()
    res = solve(y, task, problems.sample_initial_guess(task, rng), opts)
    return y, res


@pytest.fixture(scope="module")
def tabletop_solutions():
    task = problems.tabletop(10)
    out = []
    for seed in range(8):
        y, res = _solved(task, seed)
        out.append((y, res))
    return task, out


def test_options_validation():
    with pytest.raises(ValueError):
        SolveOptions(kkt_tol=0)
    with pytest.raises(ValueError):
        SolveOptions(penalty_growth=1.0)
    with pytest.raises(ValueError):
        SolveOptions(inner="newton")


def test_locally_optimal_results_recheck_feasible(tabletop_solutions):
    task, sols = tabletop_solutions
    n_ok = 0
    for y, res in sols:
        if res.locally_optimal:
            n_ok += 1
            assert res.final_violation <= 1e-6
            assert res.final_stationarity <= 1e-4
            assert problems.violation(res.x_star, y, task).total <= 1e-6
    assert n_ok >= len(sols) // 2


def test_resolve_from_optimum_is_idempotent(tabletop_solutions):
    task, sols = tabletop_solutions
    for y, res in sols:
        if not res.locally_optimal:
            continue
        again = warm_start(y, task, res.x_star)
        assert again.locally_optimal
        assert again.iterations <= 5
        assert np.max(np.abs(again.x_star - res.x_star)) <= 1e-6


def test_solution_within_box(tabletop_solutions):
    task, sols = tabletop_solutions
    lo, hi = task.x_bounds()
    for _, res in sols:
        assert np.all((res.x_star >= lo) & (res.x_star <= hi))


def test_obstacle_free_minimum_time():
    # each axis must travel 0.8 with |u| <= 1, so the optimal duration is 0.8
    task = problems.tabletop(10)
    y = ProblemParams(FAR, np.full(4, 0.05), np.array([0.8, 0.8])).to_array()
    rng = np.random.default_rng(0)
    res = solve(y, task, problems.sample_initial_guess(task, rng))
    assert res.locally_optimal
    assert res.x_star[0] == pytest.approx(0.8, rel=0.05)


def test_goal_inside_obstacle_not_locally_optimal():
    task = problems.tabletop(8)
    centers = FAR.copy()
    centers[0] = [0.8, 0.8]
    y = ProblemParams(centers, np.array([0.15, 0.05, 0.05, 0.05]), np.array([0.8, 0.8])).to_array()
    res = solve(y, task, problems.sample_initial_guess(task, 0), SolveOptions(max_outer_iters=10))
    assert res.status is not Status.LOCALLY_OPTIMAL
    assert res.final_violation > 1e-6


def test_zero_budget_returns_projection():
    task = problems.tabletop(5)
    y = problems.sample_problem(task, 1).to_array()
    x = problems.sample_initial_guess(task, 1) * 3.0
    res = warm_start(y, task, x, SolveOptions(max_outer_iters=0))
    assert res.status is Status.ITER_LIMIT and res.iterations == 0
    lo, hi = task.x_bounds()
    np.testing.assert_array_equal(res.x_star, np.clip(x, lo, hi))


def test_non_finite_start_is_infeasible():
    task = problems.tabletop(5)
    y = problems.sample_problem(task, 1).to_array()
    x = np.full(task.dim, np.nan)
    assert solve(y, task, x).status is Status.INFEASIBLE


def test_time_limit_status():
    task = problems.two_car(10)
    y = problems.sample_problem(task, 2).to_array()
    res = solve(y, task, problems.sample_initial_guess(task, 2), SolveOptions(time_limit=1e-9))
    assert res.status in (Status.TIME_LIMIT, Status.LOCALLY_OPTIMAL)


def test_deterministic():
    task = problems.two_car(6)
    _, a = _solved(task, 4)
    _, b = _solved(task, 4)
    assert a.status == b.status and a.iterations == b.iterations
    np.testing.assert_array_equal(a.x_star, b.x_star)
    assert a.final_violation == b.final_violation
    assert a.final_stationarity == b.final_stationarity


def test_projected_gradient_inner_solver():
    task = problems.tabletop(6)
    opts = SolveOptions(inner="projected_gradient", max_inner_iters=500)
    y, res = _solved(task, 3, opts)
    assert res.locally_optimal
    assert problems.violation(res.x_star, y, task).total <= 1e-6
    assert warm_start(y, task, res.x_star, opts).iterations <= 5


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_locally_optimal_never_worsens_violation(seed):
    task = problems.tabletop(6)
    rng = np.random.default_rng(seed)
    y = problems.sample_problem(task, rng).to_array()
    x0 = problems.sample_initial_guess(task, rng)
    res = solve(y, task, x0)
    if res.locally_optimal:
        assert res.final_violation <= max(problems.violation(x0, y, task).total, 1e-6)


def test_warm_start_from_optimum_beats_uniform():
    task = problems.tabletop(10)
    rng = np.random.default_rng(7)
    from_opt, from_uniform = [], []
    while len(from_opt) < 50:
        y = problems.sample_problem(task, rng).to_array()
        first = solve(y, task, problems.sample_initial_guess(task, rng))
        if not first.locally_optimal:
            continue
        from_opt.append(warm_start(y, task, first.x_star).iterations)
        from_uniform.append(warm_start(y, task, problems.sample_initial_guess(task, rng)).iterations)
    assert np.median(from_uniform) > np.median(from_opt)
    assert max(from_opt) <= 5
