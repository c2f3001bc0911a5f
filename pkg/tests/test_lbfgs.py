from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handrecon.errors import NonFiniteObjective
from handrecon.lbfgs import SolverOptions, lbfgs_minimize, strong_wolfe


def quadratic(a):
    a = np.asarray(a, float)
    return lambda x: (float(np.sum((x - a) ** 2)), 2 * (x - a))


def rosenbrock(x):
    a, b = x
    f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    return f, g


def wolfe_holds(step, c1, c2, tol=1e-12):
    armijo = step.f <= step.f0 + c1 * step.alpha * step.dphi0 + tol * max(1.0, abs(step.f0))
    curvature = abs(step.dphi) <= c2 * abs(step.dphi0) + tol
    return armijo and curvature


class TestOptions:
    @pytest.mark.parametrize(
        "kw",
        [dict(window_size=25, window_overlap=25), dict(window_overlap=0), dict(tolerance=0.0),
         dict(c1=0.9, c2=0.5), dict(history_size=0), dict(max_iterations=-1)],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SolverOptions(**kw)

    def test_defaults(self):
        o = SolverOptions()
        assert (o.learning_rate, o.max_iterations, o.tolerance) == (1.0, 100, 1e-5)
        assert (o.window_size, o.window_overlap, o.c1, o.c2, o.history_size) == (50, 25, 1e-4, 0.9, 10)


class TestQuadratic:
    @pytest.mark.parametrize("seed", range(5))
    def test_solved_in_three_iterations(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(0, 10, 6)
        x, rep = lbfgs_minimize(quadratic(a), rng.normal(0, 10, 6))
        assert np.max(np.abs(x - a)) < 1e-8
        assert rep.iterations <= 3 and rep.converged

    def test_zero_iterations_returns_start(self):
        x0 = np.array([3.0, -1.0])
        x, rep = lbfgs_minimize(quadratic([0, 0]), x0, SolverOptions(max_iterations=0))
        np.testing.assert_array_equal(x, x0)
        assert not rep.converged and rep.iterations == 0

    def test_already_optimal(self):
        x, rep = lbfgs_minimize(quadratic([1, 2]), np.array([1.0, 2.0]))
        assert rep.converged and rep.reason == "gradient" and rep.iterations == 0


class TestRosenbrock:
    def test_reaches_minimum(self):
        x, rep = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]), SolverOptions(max_iterations=200))
        assert np.max(np.abs(x - 1.0)) < 1e-5
        assert all(wolfe_holds(s, 1e-4, 0.9) for s in rep.steps if s.wolfe)

    def test_minimum_agrees_with_grid_oracle(self):
        a, b = np.meshgrid(np.linspace(-2, 2, 401), np.linspace(-1, 3, 401))
        f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
        i = np.unravel_index(np.argmin(f), f.shape)
        assert abs(a[i] - 1) < 0.02 and abs(b[i] - 1) < 0.02

    def test_monotone_objective(self):
        _, rep = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]))
        vals = [rep.initial_value] + [s.f for s in rep.steps]
        assert all(b <= a for a, b in zip(vals, vals[1:]))


class TestBounds:
    def test_active_bound(self):
        x, rep = lbfgs_minimize(quadratic([5.0, -5.0]), np.zeros(2), lower=[-1, -1], upper=[1, 1])
        np.testing.assert_allclose(x, [1.0, -1.0], atol=1e-10)
        assert rep.converged

    def test_start_outside_is_clipped(self):
        x, _ = lbfgs_minimize(quadratic([0.0]), np.array([10.0]), lower=[-1], upper=[1])
        assert abs(x[0]) < 1e-8


class TestFailures:
    def test_nan_reports_iterate(self):
        def bad(x):
            return (math.nan if x[0] > 0.1 else -float(np.sum(x))), -np.ones_like(x)

        with pytest.raises(NonFiniteObjective) as exc:
            lbfgs_minimize(bad, np.zeros(2))
        assert exc.value.iterate is not None

    def test_nonfinite_start(self):
        with pytest.raises(NonFiniteObjective):
            lbfgs_minimize(lambda x: (math.inf, x), np.zeros(2))


class TestStrongWolfe:
    def test_accepted_step_satisfies_conditions(self):
        f = lambda a: ((a - 2.0) ** 4, 4 * (a - 2.0) ** 3, 4 * (a - 2.0) ** 3)  # noqa: E731
        f0, d0 = 16.0, -32.0
        res = strong_wolfe(lambda a: f(a), f0, d0, 1.0, 1e-4, 0.9)
        assert res.ok
        assert res.f <= f0 + 1e-4 * res.alpha * d0
        assert abs(res.dphi) <= 0.9 * abs(d0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 12))
def test_random_convex_quadratics(seed, n):
    rng = np.random.default_rng(seed)
    A = rng.normal(0, 1, (n, n))
    H = A @ A.T + n * np.eye(n)
    b = rng.normal(0, 1, n)
    obj = lambda x: (float(0.5 * x @ H @ x - b @ x), H @ x - b)  # noqa: E731
    x, rep = lbfgs_minimize(obj, np.zeros(n), SolverOptions(tolerance=1e-14, max_iterations=500))
    np.testing.assert_allclose(x, np.linalg.solve(H, b), atol=1e-6)
    assert rep.final_value <= rep.initial_value
    assert all(wolfe_holds(s, 1e-4, 0.9) for s in rep.steps if s.wolfe)
