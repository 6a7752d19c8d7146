import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lossrobust.lossgeom import (ABSOLUTE, CROSS_ENTROPY, MISCLASSIFICATION, SQUARED,
                                 UncertaintySetSpec, ellipsoidal_set, huber, kl_divergence, member)
from lossrobust.robustopt import (ConvergenceError, Newsvendor, Portfolio, RobustProblem,
                                  ShortestPath, SolverError, cutting_plane, dp_shortest_path,
                                  ellipsoid_maximizer, ellipsoid_support, golden_section,
                                  grid_edges, is_monotone_path, kl_worst_case,
                                  kl_worst_case_batch, monotone_paths, newsvendor_cutting_plane,
                                  pessimization_value, portfolio_closed_form,
                                  portfolio_cutting_plane, robust_counterpart_value, solve,
                                  solve_newsvendor, solve_newsvendor_batch, solve_portfolio,
                                  solve_shortest_path, solutions_to_csv)

NV = Newsvendor()


def _ell(rng, m, scaled=True):
    c = rng.standard_normal(m)
    s = rng.uniform(0.2, 2.0, m) if scaled else None
    return ellipsoidal_set(c, rng.uniform(0.1, 3.0), s)


# ------------------------------------------------------- ellipsoid support


def test_support_examples():
    s = ellipsoidal_set([1.0, -2.0, 0.5], 0.0)
    assert ellipsoid_support(s, [1.0, 2.0, 3.0]) == pytest.approx(1 - 4 + 1.5)
    s = ellipsoidal_set([1.0, -2.0, 0.5], 1.7)
    assert ellipsoid_support(s, [0.0, 1.0, 0.0]) == pytest.approx(-2.0 + 1.7)


def test_support_vs_boundary_sampling():
    rng = np.random.default_rng(0)
    for _ in range(3):
        s = _ell(rng, 3)
        w = rng.standard_normal(3)
        u = rng.standard_normal((1_000_000, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        c, axes, r = s.ellipsoid()
        sampled = np.max((c + r * axes * u) @ w)
        exact = ellipsoid_support(s, w)
        assert sampled <= exact + 1e-12
        assert abs(sampled - exact) <= 1e-4 * abs(exact)


@given(st.integers(0, 2**31), st.integers(1, 6))
def test_maximizer_on_boundary_and_attains_support(seed, m):
    rng = np.random.default_rng(seed)
    s = _ell(rng, m)
    w = rng.standard_normal(m)
    y = ellipsoid_maximizer(s, w)
    assert w @ y == pytest.approx(ellipsoid_support(s, w), rel=1e-12, abs=1e-12)
    assert s.value(y) == pytest.approx(s.radius, rel=1e-9)


# ---------------------------------------------------------------- KL ball


def kl_oracle(p_hat, costs, rho):
    """Two-scenario worst case: scan p_1 on a 1e-6 grid, then refine the ends of
    the feasible interval by bisection on the divergence."""
    q = np.maximum(np.asarray(p_hat, float), 1e-12)
    q = q / q.sum()
    kl = lambda a: kl_divergence(np.array([a, 1 - a]), q)  # noqa: E731
    grid = np.linspace(0.0, 1.0, 1_000_001)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.where(grid > 0, grid * np.log(grid / q[0]), 0.0) + \
            np.where(grid < 1, (1 - grid) * np.log((1 - grid) / q[1]), 0.0)
    feas = np.flatnonzero(vals <= rho)
    ends = []
    for k, step in ((feas[0], -1), (feas[-1], 1)):
        a, b = grid[k], grid[min(max(k + step, 0), grid.size - 1)]
        if a == b or kl(b) <= rho:
            ends.append(b)
            continue
        for _ in range(60):
            mid = 0.5 * (a + b)
            a, b = (mid, b) if kl(mid) <= rho else (a, mid)
        ends.append(a)
    return max(e * costs[0] + (1 - e) * costs[1] for e in ends)


def test_kl_vs_grid_oracle():
    rng = np.random.default_rng(1)
    for _ in range(25):
        p = rng.dirichlet([1.0, 1.0])
        c = rng.uniform(-5, 20, 2)
        rho = rng.choice([rng.uniform(0, 0.05), rng.uniform(0, 1.0)])
        _, v = kl_worst_case(p, c, rho)
        assert v == pytest.approx(kl_oracle(p, c, rho), abs=1e-6)


def test_kl_examples():
    p = np.array([0.3, 0.7])
    c = np.array([4.0, 1.0])
    q, v = kl_worst_case(p, c, 0.0)
    np.testing.assert_allclose(q, p)
    assert v == pytest.approx(p @ c)
    q, v = kl_worst_case(p, c, math.log(1 / 0.3))
    assert v == pytest.approx(4.0)
    np.testing.assert_allclose(q, [1.0, 0.0])


@given(st.integers(0, 2**31), st.integers(2, 5), st.floats(0, 3))
def test_kl_feasible_and_dominates_center(seed, l, rho):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(l))
    c = rng.normal(0, 5, l)
    q, v = kl_worst_case(p, c, rho)
    assert abs(q.sum() - 1) < 1e-12 and np.all(q >= 0)
    assert kl_divergence(q, np.maximum(p, 1e-12) / np.maximum(p, 1e-12).sum()) <= rho + 1e-9
    assert v >= p @ c - 1e-9
    assert v <= c.max() + 1e-12


@given(st.integers(0, 2**31), st.floats(0, 2), st.floats(0, 2))
def test_kl_monotone_in_rho(seed, r1, r2):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(3))
    c = rng.normal(0, 1, 3)
    r1, r2 = sorted((r1, r2))
    assert kl_worst_case(p, c, r1)[1] <= kl_worst_case(p, c, r2)[1] + 1e-12


@pytest.mark.parametrize("rho", [1e-38, 1e-23, 1e-16, 1e-12])
def test_kl_tiny_radius_matches_expansion(rho):
    # for small rho the worst case is mean + sqrt(2 rho Var) up to O(rho)
    rng = np.random.default_rng(16)
    for _ in range(20):
        p = rng.dirichlet(np.ones(3))
        c = rng.normal(0, 1, 3)
        m, v = p @ c, p @ (c - p @ c) ** 2
        assert kl_worst_case(p, c, rho)[1] == pytest.approx(m + math.sqrt(2 * rho * v), abs=1e-15 + rho)


def test_kl_batch_matches_scalar():
    rng = np.random.default_rng(2)
    P = rng.dirichlet(np.ones(2), 50)
    C = rng.uniform(0, 10, (50, 2))
    r = rng.uniform(0, 1, 50)
    _, vb = kl_worst_case_batch(P, C, r)
    for i in range(50):
        assert vb[i] == kl_worst_case(P[i], C[i], r[i])[1]


def test_kl_saturates_near_limit():
    # the point mass on the costly scenario has divergence ln(1e9) ~ 20.7
    p = np.array([1e-9, 1 - 1e-9])
    assert kl_worst_case(p, [10.0, 0.0], 20.0)[1] < 10.0
    assert kl_worst_case(p, [10.0, 0.0], 25.0)[1] == pytest.approx(10.0, abs=1e-6)


# ------------------------------------------------------------- newsvendor


def test_newsvendor_validation():
    with pytest.raises(ValueError):
        Newsvendor(c=1, b=0.5)
    with pytest.raises(ValueError):
        Newsvendor(demands=(10.0, 1.0))


def test_newsvendor_point_mass():
    sol = solve(RobustProblem(NV, UncertaintySetSpec(CROSS_ENTROPY, np.array([1.0, 0.0]), 0.0)))
    assert sol.x[0] == pytest.approx(1.0, abs=1e-9)
    assert sol.robust_value == pytest.approx(1.0, abs=1e-9)


def test_newsvendor_huge_ball_balances_scenarios():
    # both point masses lie in the ball, so the order equalizes the two scenario costs
    sol = solve(RobustProblem(NV, UncertaintySetSpec(CROSS_ENTROPY, np.array([0.6, 0.4]), 50.0)))
    assert sol.x[0] == pytest.approx(7.75, abs=1e-8)
    assert sol.robust_value == pytest.approx(21.25, abs=1e-6)


def test_newsvendor_uniform_vs_grid():
    p = np.array([0.5, 0.5])
    sol = solve(RobustProblem(NV, UncertaintySetSpec(CROSS_ENTROPY, p, 0.0)))
    xs = np.arange(0, 10 + 1e-12, 1e-4)
    vals = NV.scenario_costs(xs) @ p
    k = int(np.argmin(vals))
    assert sol.x[0] in (1.0, 10.0)
    assert sol.x[0] == pytest.approx(xs[k], abs=1e-4)
    assert sol.robust_value == pytest.approx(vals[k], abs=1e-9)


def test_newsvendor_robust_vs_grid():
    rng = np.random.default_rng(3)
    xs = np.arange(0, 10 + 1e-12, 1e-3)
    for _ in range(5):
        p = rng.dirichlet([1, 1])
        rho = rng.uniform(0, 0.5)
        sol = solve(RobustProblem(NV, UncertaintySetSpec(CROSS_ENTROPY, p, rho)))
        C = NV.scenario_costs(xs)
        grid = kl_worst_case_batch(np.tile(p, (xs.size, 1)), C, np.full(xs.size, rho))[1].min()
        assert sol.robust_value <= grid + 1e-9
        assert sol.robust_value >= grid - 1e-2


def test_newsvendor_batch_matches_single():
    rng = np.random.default_rng(4)
    P = rng.dirichlet([1, 1], 10)
    x, v, _ = solve_newsvendor_batch(NV, P, 0.3)
    for i in range(10):
        sol = solve(RobustProblem(NV, UncertaintySetSpec(CROSS_ENTROPY, P[i], 0.3)))
        assert v[i] == pytest.approx(sol.robust_value, abs=1e-9)


def test_newsvendor_misclassification_set():
    s = UncertaintySetSpec(MISCLASSIFICATION, np.array([1.0, 0.0]), 2.0)
    sol = solve_newsvendor(RobustProblem(NV, s))
    # worst case over both labels: minimize max(cost_low, cost_high), crossing at x = 7.75
    assert sol.x[0] == pytest.approx(7.75, abs=1e-8)
    assert sol.robust_value == pytest.approx(21.25, abs=1e-8)


def test_newsvendor_monotone_in_rho():
    p = np.array([0.7, 0.3])
    vals = [solve_newsvendor_batch(NV, p, r)[1][0] for r in np.linspace(0, 2, 15)]
    assert np.all(np.diff(vals) >= -1e-9)


def test_golden_section_vectorized():
    x, _ = golden_section(lambda t: (t - np.array([0.3, 2.0])) ** 2, [0.0, 0.0], [1.0, 5.0])
    np.testing.assert_allclose(x, [0.3, 2.0], atol=1e-9)


# -------------------------------------------------------------- portfolio


def _pf(yhat, rho, scale=None):
    return RobustProblem(Portfolio(len(yhat)), ellipsoidal_set(yhat, rho, scale))


def test_portfolio_zero_radius_picks_best_asset():
    sol = solve_portfolio(_pf([0.1, 0.5, -0.2], 0.0))
    np.testing.assert_array_equal(sol.x, [0, 1, 0])


def test_portfolio_symmetric_gives_uniform():
    sol = solve_portfolio(_pf([0.3] * 5, 1.0))
    np.testing.assert_allclose(sol.x, 0.2, atol=1e-7)


def _simplex_grid_min(yhat, axes, r, res=100):
    best = math.inf
    n = yhat.size
    assert n == 5
    for a in range(res + 1):
        for b in range(res + 1 - a):
            rest = res - a - b
            c = np.arange(rest + 1)
            d = np.arange(rest + 1)
            C, D = np.meshgrid(c, d, indexing="ij")
            keep = C + D <= rest
            C, D = C[keep], D[keep]
            E = rest - C - D
            X = np.column_stack([np.full(C.size, a), np.full(C.size, b), C, D, E]) / res
            vals = -X @ yhat + r * np.linalg.norm(X * axes, axis=1)
            best = min(best, float(vals.min()))
    return best


def test_portfolio_vs_simplex_grid():
    rng = np.random.default_rng(5)
    for _ in range(2):
        s = _ell(rng, 5)
        sol = solve_portfolio(RobustProblem(Portfolio(5), s))
        c, axes, r = s.ellipsoid()
        grid = _simplex_grid_min(c, axes, r)
        assert sol.robust_value <= grid + 1e-12
        assert abs(sol.robust_value - grid) <= 1e-3


def test_portfolio_vs_kkt_closed_form():
    rng = np.random.default_rng(6)
    for _ in range(200):
        m = int(rng.integers(2, 8))
        s = _ell(rng, m)
        sol = solve_portfolio(RobustProblem(Portfolio(m), s))
        c, axes, r = s.ellipsoid()
        x = portfolio_closed_form(c, axes, r)
        np.testing.assert_allclose(sol.x, x, atol=1e-6)
        f = lambda z: -c @ z + r * np.linalg.norm(axes * z)  # noqa: E731
        assert sol.robust_value == pytest.approx(f(x), abs=1e-7)


@given(st.integers(0, 2**31))
def test_portfolio_feasible_and_monotone(seed):
    rng = np.random.default_rng(seed)
    c, s = rng.standard_normal(4), rng.uniform(0.2, 2, 4)
    vals = []
    for rho in (0.0, 0.5, 1.0, 2.0):
        sol = solve_portfolio(_pf(c, rho, s))
        assert np.all(sol.x >= 0) and abs(sol.x.sum() - 1) <= 1e-9
        vals.append(sol.robust_value)
    assert np.all(np.diff(vals) >= -1e-9)


def test_portfolio_iteration_cap():
    with pytest.raises(ConvergenceError, match="gap"):
        solve_portfolio(_pf([0.1, 0.2, 0.3, 0.25], 1.0, [1, 2, 0.5, 1]), tol=0.0, max_iter=3)


# ---------------------------------------------------------- shortest path


def _sp(yhat, rho, scale=None, side=5):
    return RobustProblem(ShortestPath(side), ellipsoidal_set(yhat, rho, scale))


def test_edges_and_paths():
    edges = grid_edges(5)
    assert len(edges) == 40
    assert edges[0] == ((0, 0), (0, 1)) and edges[1] == ((0, 0), (1, 0))
    P = monotone_paths(5)
    assert P.shape == (70, 40)
    assert np.all(P.sum(axis=1) == 8)
    assert len({tuple(r) for r in P}) == 70


def test_all_equal_costs_tie_to_first_path():
    sol = solve_shortest_path(_sp(np.ones(40), 0.0))
    np.testing.assert_array_equal(sol.x, monotone_paths(5)[0])


def test_huge_radius_ties_to_first_path():
    rng = np.random.default_rng(7)
    sol = solve_shortest_path(_sp(rng.standard_normal(40) * 1e-6, 1e9))
    np.testing.assert_array_equal(sol.x, monotone_paths(5)[0])


def test_zero_radius_matches_dp():
    rng = np.random.default_rng(8)
    for _ in range(50):
        y = rng.standard_normal(40)
        sol = solve_shortest_path(_sp(y, 0.0))
        v, x = dp_shortest_path(y, 5)
        assert sol.robust_value == pytest.approx(v, abs=1e-12)
        np.testing.assert_array_equal(sol.x, x)


@given(st.integers(0, 2**31), st.floats(0, 5))
def test_shortest_path_feasible_and_optimal(seed, rho):
    rng = np.random.default_rng(seed)
    y, s = rng.standard_normal(12), rng.uniform(0.2, 2, 12)
    sol = solve_shortest_path(_sp(y, rho, s, side=3))
    assert is_monotone_path(sol.x, 3)
    P = monotone_paths(3)
    brute = min(p @ y + rho * math.sqrt(p @ s**2) for p in P)
    assert sol.robust_value == pytest.approx(brute, abs=1e-12)


def test_shortest_path_monotone_in_rho():
    rng = np.random.default_rng(9)
    y, s = rng.standard_normal(40), rng.uniform(0.2, 2, 40)
    vals = [solve_shortest_path(_sp(y, r, s)).robust_value for r in np.linspace(0, 4, 12)]
    assert np.all(np.diff(vals) >= 0)


def test_large_grid_refused():
    with pytest.raises(SolverError, match="cutting_plane"):
        monotone_paths(9)


# ----------------------------------------------------------- cutting plane


def test_cutting_plane_singleton_one_iteration():
    sol = portfolio_cutting_plane(ellipsoidal_set([0.1, 0.4, 0.2], 0.0))
    assert sol.iterations == 1
    np.testing.assert_allclose(sol.x, [0, 1, 0], atol=1e-9)


def test_cutting_plane_matches_portfolio_solver():
    rng = np.random.default_rng(10)
    for _ in range(10):
        s = _ell(rng, 5)
        cp = portfolio_cutting_plane(s)
        fw = solve_portfolio(RobustProblem(Portfolio(5), s))
        assert cp.robust_value == pytest.approx(fw.robust_value, abs=1e-6)
        mv = cp.diagnostics["master_values"]
        assert np.all(np.diff(mv) >= -1e-9)


def test_cutting_plane_matches_newsvendor_solver():
    rng = np.random.default_rng(11)
    for _ in range(10):
        s = UncertaintySetSpec(CROSS_ENTROPY, rng.dirichlet([1, 1]), rng.uniform(0, 1))
        cp = newsvendor_cutting_plane(NV, s)
        gs = solve_newsvendor(RobustProblem(NV, s))
        assert cp.robust_value == pytest.approx(gs.robust_value, abs=1e-6)


def test_cutting_plane_iteration_cap():
    # a pessimizer that always finds a fresh violation never lets the loop settle
    g = lambda y, x: 1.0  # noqa: E731
    with pytest.raises(ConvergenceError, match="violations"):
        cutting_plane(g, lambda x: x, lambda ys: (np.zeros(1), 0.0), np.zeros(1), max_iter=5)


# ------------------------------------------------------- robust counterpart


def test_counterpart_squared_closed_form():
    rng = np.random.default_rng(12)
    for _ in range(20):
        c, w = rng.standard_normal(4), rng.standard_normal(4)
        rho, tau = rng.uniform(0.1, 3), rng.normal()
        s = ellipsoidal_set(c, rho)
        expected = w @ c + rho * np.linalg.norm(w) - tau
        assert robust_counterpart_value(s, w, tau) == pytest.approx(expected, abs=1e-6)
        assert ellipsoid_support(s, w) - tau == pytest.approx(expected, abs=1e-12)


def test_counterpart_zero_radius():
    c, w = np.array([0.5, -1.0]), np.array([2.0, 1.0])
    for kind in (SQUARED, ABSOLUTE, huber(0.5)):
        s = UncertaintySetSpec(kind, c, 0.0)
        assert robust_counterpart_value(s, w, 0.3) == pytest.approx(w @ c - 0.3, abs=1e-6)


def test_counterpart_msev_matches_support():
    rng = np.random.default_rng(13)
    for _ in range(50):
        s = _ell(rng, 5)
        w = rng.standard_normal(5)
        assert robust_counterpart_value(s, w) == pytest.approx(ellipsoid_support(s, w), abs=1e-8)


def test_counterpart_absolute_matches_pessimization():
    rng = np.random.default_rng(14)
    for _ in range(50):
        s = UncertaintySetSpec(ABSOLUTE, rng.standard_normal(3), rng.uniform(0, 2),
                               weights=rng.uniform(0.5, 2, 3))
        w = rng.standard_normal(3)
        assert robust_counterpart_value(s, w) == pytest.approx(pessimization_value(s, w), abs=1e-6)


@given(st.integers(0, 2**31))
def test_weak_duality_on_sampled_members(seed):
    rng = np.random.default_rng(seed)
    kind = [SQUARED, ABSOLUTE, huber(0.7)][seed % 3]
    s = UncertaintySetSpec(kind, rng.standard_normal(3), rng.uniform(0.05, 3))
    w = rng.standard_normal(3)
    dual = robust_counterpart_value(s, w)
    for _ in range(30):
        y = s.center + rng.normal(0, 2, 3)
        if member(s, y):
            assert dual >= w @ y - 1e-9


def test_huber_strong_duality_vs_constrained_search():
    from scipy.optimize import minimize
    rng = np.random.default_rng(15)
    for _ in range(5):
        s = UncertaintySetSpec(huber(0.8), rng.standard_normal(2), rng.uniform(0.2, 2))
        w = rng.standard_normal(2)
        cons = {"type": "ineq", "fun": lambda y: s.radius - s.value(y)}
        best = -math.inf
        for _ in range(5):
            res = minimize(lambda y: -(w @ y), s.center + rng.normal(0, 0.1, 2), constraints=[cons],
                           method="SLSQP", options={"ftol": 1e-12, "maxiter": 500})
            if res.success and s.value(res.x) <= s.radius + 1e-9:
                best = max(best, -res.fun)
        assert robust_counterpart_value(s, w) == pytest.approx(best, abs=1e-6)


def test_counterpart_rejects_classification_sets():
    with pytest.raises(ValueError):
        robust_counterpart_value(UncertaintySetSpec(CROSS_ENTROPY, np.array([0.5, 0.5]), 1.0), [1.0, 1.0])


# ------------------------------------------------------------------- misc


def test_solution_csv():
    sol = solve_portfolio(_pf([0.1, 0.2], 0.5))
    text = solutions_to_csv([sol.csv_row("portfolio", 0.1, "mse", 0.5)], 2)
    lines = text.splitlines()
    assert lines[0] == "problem,alpha,method,radius,robust_value,x1,x2"
    assert lines[1].startswith("portfolio,0.1,mse,0.5,")
