from __future__ import annotations

import itertools

import numpy as np
import pytest

from app.errors import InputError
from app.qp import QpProblem, QpSolver, QpStatus, project_box, solve_qp


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _random_problem(rng: np.random.Generator, n: int) -> QpProblem:
    m = rng.normal(size=(n, n))
    return QpProblem.build(
        m @ m.T + 0.5 * np.eye(n),
        rng.normal(size=n) * 3.0,
        eq_matrix=np.ones((1, n)),
        eq_rhs=np.array([rng.uniform(-0.5, 0.5)]),
        lower=np.full(n, -1.0),
        upper=np.full(n, 1.0),
    )


def _enumeration_oracle(problem: QpProblem) -> float:
    """Best objective over every choice of {lower, upper, free} per coordinate (strictly convex problems)."""

    n = problem.dimension
    best = np.inf
    for pattern in itertools.product((-1, 0, 1), repeat=n):
        fixed = [i for i, p in enumerate(pattern) if p != 0]
        values = {i: problem.lower[i] if pattern[i] < 0 else problem.upper[i] for i in fixed}
        rows = [np.eye(n)[i] for i in fixed]
        rhs = [values[i] for i in fixed]
        a = np.vstack([problem.eq_matrix] + rows) if rows else problem.eq_matrix
        b = np.concatenate([problem.eq_rhs, rhs]) if rows else problem.eq_rhs
        k = a.shape[0]
        kkt = np.block([[problem.quadratic, a.T], [a, np.zeros((k, k))]])
        try:
            sol = np.linalg.solve(kkt, np.concatenate([-problem.linear, b]))
        except np.linalg.LinAlgError:
            continue
        x = sol[:n]
        if not np.allclose(a @ x, b, atol=1e-9):
            continue
        if np.all(x >= problem.lower - 1e-9) and np.all(x <= problem.upper + 1e-9):
            best = min(best, problem.objective(x))
    return best


# ---------------------------------------------------------------------------
# Small closed-form problems
# ---------------------------------------------------------------------------


def test_projection_onto_halfline():
    problem = QpProblem.build(np.array([[2.0]]), np.zeros(1), lower=np.array([1.0]))
    solution = solve_qp(problem)

    assert solution.status == QpStatus.OPTIMAL
    assert solution.x[0] == pytest.approx(1.0, abs=1e-6)
    assert solution.objective == pytest.approx(1.0, abs=1e-6)


def test_clamped_unconstrained_optimum():
    problem = QpProblem.build(np.array([[2.0]]), np.array([-6.0]), lower=np.array([0.0]), upper=np.array([2.0]), constant=9.0)
    solution = solve_qp(problem)

    assert solution.x[0] == pytest.approx(2.0, abs=1e-6)
    assert solution.objective == pytest.approx(1.0, abs=1e-6)


def test_equality_constrained_symmetric():
    problem = QpProblem.build(2.0 * np.eye(2), np.zeros(2), eq_matrix=np.ones((1, 2)), eq_rhs=np.array([1.0]))
    solution = solve_qp(problem)

    assert solution.optimal
    assert np.allclose(solution.x, [0.5, 0.5], atol=1e-6)
    assert solution.kkt_residual <= 1e-8


def test_inequality_rows():
    # min (x1-1)^2 + (x2-2)^2  s.t.  x1 + x2 <= 1
    problem = QpProblem.build(2.0 * np.eye(2), np.array([-2.0, -4.0]), ineq_matrix=np.ones((1, 2)), ineq_rhs=np.array([1.0]))
    solution = solve_qp(problem)

    assert np.allclose(solution.x, [0.0, 1.0], atol=1e-6)


def test_inconsistent_constraints_are_reported_infeasible():
    problem = QpProblem.build(
        np.array([[1.0]]), np.zeros(1), ineq_matrix=np.array([[1.0]]), ineq_rhs=np.array([1.0]), lower=np.array([2.0])
    )
    solution = solve_qp(problem)

    assert solution.status == QpStatus.INFEASIBLE
    assert not solution.optimal


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def test_nan_data_is_rejected():
    with pytest.raises(InputError):
        QpProblem.build(np.eye(2), np.array([np.nan, 0.0]))


def test_non_psd_quadratic_is_rejected():
    with pytest.raises(InputError):
        QpProblem.build(np.diag([1.0, -1.0]), np.zeros(2))


def test_inverted_bounds_are_rejected():
    with pytest.raises(InputError):
        QpProblem.build(np.eye(1), np.zeros(1), lower=np.array([1.0]), upper=np.array([0.0]))


def test_with_linear_keeps_constraints():
    problem = QpProblem.build(np.eye(2), np.zeros(2), lower=np.zeros(2))
    moved = problem.with_linear(np.array([1.0, -1.0]))

    assert np.array_equal(moved.lower, problem.lower)
    with pytest.raises(InputError):
        problem.with_linear(np.zeros(3))


# ---------------------------------------------------------------------------
# Box projection
# ---------------------------------------------------------------------------


def test_project_box_inside_is_unchanged():
    x = np.array([0.2, 0.7])
    assert np.array_equal(project_box(x, np.zeros(2), np.ones(2)), x)


def test_project_box_clamps_and_is_idempotent():
    once = project_box(np.array([-1.0, 5.0]), np.zeros(2), np.ones(2))
    assert once.tolist() == [0.0, 1.0]
    assert np.array_equal(project_box(once, np.zeros(2), np.ones(2)), once)


# ---------------------------------------------------------------------------
# Random problems
# ---------------------------------------------------------------------------


def test_random_problems_match_enumeration_oracle():
    rng = np.random.default_rng(11)
    for n in (2, 3, 4, 5, 6):
        problem = _random_problem(rng, n)
        solution = solve_qp(problem)
        assert solution.optimal
        assert solution.objective == pytest.approx(_enumeration_oracle(problem), abs=1e-6)


def test_starting_point_does_not_change_the_optimum():
    rng = np.random.default_rng(3)
    problem = _random_problem(rng, 5)
    a = QpSolver(problem).solve(x0=np.zeros(5))
    b = QpSolver(problem).solve(x0=rng.uniform(-1.0, 1.0, size=5))

    assert np.allclose(a.x, b.x, atol=1e-6)


def test_optimum_is_first_order_stationary_along_feasible_directions():
    rng = np.random.default_rng(5)
    problem = _random_problem(rng, 4)
    x = solve_qp(problem).x
    base = problem.objective(x)
    for _ in range(200):
        d = rng.normal(size=4)
        d -= d.mean()  # keep sum(x) fixed
        step = 1e-3
        candidate = x + step * d
        if np.all(candidate >= problem.lower) and np.all(candidate <= problem.upper):
            assert problem.objective(candidate) >= base - 1e-7


def test_warm_started_resolve_with_new_linear_term():
    problem = QpProblem.build(2.0 * np.eye(2), np.zeros(2), lower=np.zeros(2), upper=np.ones(2))
    solver = QpSolver(problem)
    solver.solve(np.array([-1.0, -1.0]))
    second = solver.solve(np.array([-4.0, 2.0]))

    assert np.allclose(second.x, [1.0, 0.0], atol=1e-6)


def test_resolve_with_unchanged_active_set_skips_the_iterations():
    problem = QpProblem.build(2.0 * np.eye(2), np.zeros(2), lower=np.zeros(2), upper=np.array([1.0, 0.3]))
    solver = QpSolver(problem)
    first = solver.solve(np.array([-1.0, -1.0]))
    second = solver.solve(np.array([-1.2, -0.9]))
    fresh = solve_qp(problem.with_linear(np.array([-1.2, -0.9])))

    assert np.allclose(first.x, [0.5, 0.3], atol=1e-6)
    assert second.iterations == 0
    assert second.optimal
    assert np.allclose(second.x, fresh.x, atol=1e-8)
    assert np.allclose(second.x, [0.6, 0.3], atol=1e-8)
