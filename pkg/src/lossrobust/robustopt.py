"""Robust solvers over loss-based uncertainty sets.

Closed forms where they exist (ellipsoid support function, KL tilting), a
conditional-gradient method for the portfolio, enumeration for the grid
shortest path, and a generic cutting-plane loop that cross-checks them.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog, minimize_scalar

from .lossgeom import UncertaintySetSpec, conjugate, member, scaled_squared_conjugate

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
THETA_CAP = 1e3
P_FLOOR = 1e-12
MAX_GRID_SIDE = 8


class SolverError(RuntimeError):
    pass


class ConvergenceError(SolverError):
    pass


# ----------------------------------------------------------------- problems


@dataclass(frozen=True)
class Newsvendor:
    c: float = 1.0
    b: float = 6.0
    h: float = 2.0
    demands: tuple[float, ...] = (1.0, 10.0)

    def __post_init__(self):
        object.__setattr__(self, "demands", tuple(float(d) for d in self.demands))
        if not (self.b > self.c > 0 and self.h >= 0):
            raise ValueError("newsvendor needs b > c > 0 and h >= 0")
        d = np.asarray(self.demands)
        if d.size < 1 or np.any(np.diff(d) <= 0) or d[0] < 0:
            raise ValueError("demands must be nonnegative and strictly increasing")

    @property
    def d_max(self) -> float:
        return self.demands[-1]

    def scenario_costs(self, x) -> np.ndarray:
        """Cost of ordering ``x`` under each demand scenario; the scenario axis is last."""
        d = np.asarray(self.demands)
        x = np.asarray(x, dtype=float)[..., None]
        return self.c * x + self.b * np.maximum(d - x, 0.0) + self.h * np.maximum(x - d, 0.0)

    def best_cost(self, j: int) -> float:
        """Hindsight-optimal cost when scenario ``j`` occurs: order exactly ``d_j``."""
        return self.c * self.demands[j]


@dataclass(frozen=True)
class Portfolio:
    n: int = 5

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one asset")


@dataclass(frozen=True)
class ShortestPath:
    grid_side: int = 5

    def __post_init__(self):
        if self.grid_side < 2:
            raise ValueError("grid_side must be >= 2")

    @property
    def n_edges(self) -> int:
        return 2 * self.grid_side * (self.grid_side - 1)


@dataclass(frozen=True)
class RobustProblem:
    kind: Newsvendor | Portfolio | ShortestPath
    set: UncertaintySetSpec


@dataclass
class RobustSolution:
    x: np.ndarray
    robust_value: float
    inner_worst_case: np.ndarray
    iterations: int = 0
    diagnostics: dict = field(default_factory=dict)

    def csv_row(self, problem: str, alpha: float | None, method: str, radius: float) -> list[str]:
        a = "" if alpha is None else repr(float(alpha))
        return ([problem, a, method, repr(float(radius)), repr(float(self.robust_value))]
                + [repr(float(v)) for v in np.atleast_1d(self.x)])


SOLUTION_HEADER = ("problem", "alpha", "method", "radius", "robust_value")


def solutions_to_csv(rows: Sequence[list[str]], n_decision: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(SOLUTION_HEADER) + [f"x{i + 1}" for i in range(n_decision)])
    w.writerows(rows)
    return buf.getvalue()


# ----------------------------------------------------------- inner maxima


def ellipsoid_support(uset: UncertaintySetSpec, w) -> float:
    """``sup_{y in U} w.y = w.yhat + rho * ||axes * w||`` for an ellipsoidal set."""
    center, axes, r = uset.ellipsoid()
    w = np.asarray(w, dtype=float)
    return float(w @ center + r * np.linalg.norm(axes * w))


def ellipsoid_maximizer(uset: UncertaintySetSpec, w) -> np.ndarray:
    """Point of the ellipsoid attaining :func:`ellipsoid_support`."""
    center, axes, r = uset.ellipsoid()
    w = np.asarray(w, dtype=float)
    aw = axes * w
    nrm = np.linalg.norm(aw)
    if nrm == 0 or r == 0:
        return center.copy()
    return center + r * axes * aw / nrm


def _tilt(logp: np.ndarray, z: np.ndarray, theta: np.ndarray):
    """Row-wise tilt ``p ~ exp(logp + theta z)``, its KL divergence from ``exp(logp)``
    and ``d KL / d theta = theta Var_p(z)``.

    The divergence is ``theta E_p[z] - log E_phat[exp(theta z)]``; for small
    ``theta |z|`` the log-partition uses expm1/log1p so that, with ``z``
    centred at its ``phat`` mean, it keeps relative accuracy as ``theta -> 0``.
    """
    tz = theta[:, None] * z
    a = logp + tz
    amax = a.max(axis=1, keepdims=True)
    p = np.exp(a - amax)
    p /= p.sum(axis=1, keepdims=True)
    mz = np.sum(p * z, axis=1)
    var = np.sum(p * (z - mz[:, None]) ** 2, axis=1)
    small = np.max(np.abs(tz), axis=1) < 0.5
    with np.errstate(over="ignore"):
        log_part = np.where(
            small,
            np.log1p(np.sum(np.exp(logp) * np.expm1(np.where(small[:, None], tz, 0.0)), axis=1)),
            amax[:, 0] + np.log(np.sum(np.exp(a - amax), axis=1)))
    kl = theta * mz - log_part
    return p, np.maximum(kl, 0.0), theta * var


def kl_worst_case_batch(p_hat, costs, rho) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`kl_worst_case` for an ``(n, l)`` stack of problems."""
    P = np.maximum(np.atleast_2d(np.asarray(p_hat, dtype=float)), P_FLOOR)
    P = P / P.sum(axis=1, keepdims=True)
    n = P.shape[0]
    C = np.broadcast_to(np.asarray(costs, dtype=float), P.shape)
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (n,))
    if np.any(rho < 0):
        raise ValueError("rho must be >= 0")
    top, bottom = C.max(axis=1), C.min(axis=1)
    argmax = C == top[:, None]
    top_mass = np.sum(np.where(argmax, P, 0.0), axis=1)
    out = P.copy()
    flat = (rho == 0) | (top == bottom)
    limit = ~flat & (rho >= -np.log(top_mass))
    out[limit] = np.where(argmax, P, 0.0)[limit] / top_mass[limit, None]

    idx = np.flatnonzero(~flat & ~limit)
    if idx.size:
        z = (C[idx] - top[idx, None]) / (top - bottom)[idx, None]
        logp = np.log(P[idx])
        # the tilt is shift invariant; centring keeps small divergences accurate
        z = z - np.sum(P[idx] * z, axis=1, keepdims=True)
        r = rho[idx]
        p_cap, kl_cap, _ = _tilt(logp, z, np.full(idx.size, THETA_CAP))
        # saturated rows: the mass off the argmax is below exp(-1e3 * gap)
        sat = kl_cap <= r
        out[idx[sat]] = p_cap[sat]
        keep = ~sat
        idx, z, logp, r = idx[keep], z[keep], logp[keep], r[keep]
    if idx.size:
        tol = 1e-13 * r
        lo = np.zeros(idx.size)
        hi = np.full(idx.size, THETA_CAP)
        theta = np.ones(idx.size)
        done = np.zeros(idx.size, dtype=bool)
        for _ in range(200):
            _, kl, dkl = _tilt(logp, z, theta)
            f = kl - r
            live = ~done
            lo = np.where(live & (f < 0), theta, lo)
            hi = np.where(live & (f >= 0), theta, hi)
            done |= (np.abs(f) <= tol) | (hi - lo <= 1e-15 * hi)
            if done.all():
                break
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                step = theta - f / dkl
            ok = (dkl > 0) & (step > lo) & (step < hi)
            theta = np.where(done, theta, np.where(ok, step, 0.5 * (lo + hi)))
        p, kl, _ = _tilt(logp, z, theta)
        # a bracket that collapsed just above the root falls back to the feasible end
        over = kl > r + tol
        if over.any():
            p[over] = _tilt(logp[over], z[over], lo[over])[0]
        out[idx] = p
    return out, np.sum(out * C, axis=1)


def kl_worst_case(p_hat, costs, rho: float) -> tuple[np.ndarray, float]:
    """Maximize ``p.costs`` over ``{p in simplex : KL(p || p_hat) <= rho}``.

    The maximizer is an exponential tilt ``p ~ p_hat * exp(theta * costs)``
    whose divergence equals ``rho``; ``theta`` is found by Newton steps
    safeguarded by bisection (the divergence is increasing in ``theta``).
    Once ``rho`` reaches the divergence of the tilt's limit (all mass on the
    costliest scenarios) that limit is returned.  ``p_hat`` is clamped at
    1e-12 and renormalized.  Costs are normalized to ``[-1, 0]`` so the cap
    ``theta <= 1e3`` is scale free.
    """
    if rho < 0:
        raise ValueError("rho must be >= 0")
    p, v = kl_worst_case_batch(np.asarray(p_hat, float)[None, :], np.asarray(costs, float)[None, :], rho)
    return p[0], float(v[0])


def _scenario_labels(uset: UncertaintySetSpec) -> np.ndarray:
    """One-hot scenario labels inside a misclassification set."""
    l = uset.dim
    eye = np.eye(l)
    keep = [e for e in eye if member(uset, e)]
    if not keep:
        raise SolverError("misclassification set contains no scenario")
    return np.array(keep)


def scenario_worst_case(uset: UncertaintySetSpec, costs) -> tuple[np.ndarray, float]:
    """Worst probability vector for a set over scenario probabilities."""
    costs = np.asarray(costs, dtype=float)
    name = uset.loss.name
    if name == "cross_entropy":
        return kl_worst_case(uset.center, costs, uset.radius)
    if name == "misclassification":
        labels = _scenario_labels(uset)
        vals = labels @ costs
        k = int(np.argmax(vals))
        return labels[k], float(vals[k])
    raise ValueError(f"newsvendor sets must be cross-entropy or misclassification, got {uset.loss}")


# ------------------------------------------------------------ newsvendor


def golden_section(f: Callable[[np.ndarray], np.ndarray], lo, hi, tol: float = 1e-9,
                   max_iter: int = 500) -> tuple[np.ndarray, int]:
    """Golden-section minimizer of unimodal ``f`` on ``[lo, hi]`` to width ``tol``.

    Vectorized: ``lo``/``hi`` may be arrays of independent problems and ``f``
    maps an array of abscissae to an array of values.
    """
    a = np.array(lo, dtype=float, ndmin=1)
    b = np.array(hi, dtype=float, ndmin=1)
    a, b = np.broadcast_arrays(a, b)
    a, b = a.copy(), b.copy()
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    it = 0
    while np.max(b - a) > tol and it < max_iter:
        it += 1
        left = f1 <= f2
        b = np.where(left, x2, b)
        a = np.where(left, a, x1)
        nx1 = np.where(left, b - GOLDEN * (b - a), x2)
        nx2 = np.where(left, x1, a + GOLDEN * (b - a))
        fn = f(np.where(left, nx1, nx2))
        f1, f2 = np.where(left, fn, f2), np.where(left, f1, fn)
        x1, x2 = nx1, nx2
    return 0.5 * (a + b), it


def _polish(F, xg: np.ndarray, anchors: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Compare the search result with fixed anchor points; ties go to the smallest x."""
    cands = np.column_stack([xg] + [np.full_like(xg, v) for v in anchors])
    cands.sort(axis=1)
    vals = np.column_stack([F(cands[:, k]) for k in range(cands.shape[1])])
    best = vals.min(axis=1, keepdims=True)
    k = np.argmax(vals <= best + 1e-12 * np.maximum(1.0, np.abs(best)), axis=1)
    rows = np.arange(xg.size)
    return cands[rows, k], vals[rows, k]


def solve_newsvendor_batch(nv: Newsvendor, p_hat, rho) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Robust order quantities for many KL balls at once.

    Returns ``(x, robust_value, worst_p)`` with one row per center in ``p_hat``.
    """
    P = np.atleast_2d(np.asarray(p_hat, dtype=float))
    if P.shape[1] != len(nv.demands):
        raise ValueError("set dimension must equal the number of demand scenarios")
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (P.shape[0],))
    F = lambda x: kl_worst_case_batch(P, nv.scenario_costs(x), rho)[1]  # noqa: E731
    xg, _ = golden_section(F, np.zeros(P.shape[0]), np.full(P.shape[0], nv.d_max))
    x, _ = _polish(F, xg, (0.0, *nv.demands))
    worst, val = kl_worst_case_batch(P, nv.scenario_costs(x), rho)
    return x, val, worst


def solve_newsvendor(problem: RobustProblem) -> RobustSolution:
    """Order quantity minimizing the worst-case expected cost over the set.

    The objective is convex in ``x`` (a maximum of convex functions), so
    golden-section search applies; the result is then compared with ``0`` and
    the demand kinks, and ties go to the smallest order.
    """
    nv, uset = problem.kind, problem.set
    if not isinstance(nv, Newsvendor):
        raise TypeError("expected a Newsvendor problem")
    if uset.dim != len(nv.demands):
        raise ValueError("set dimension must equal the number of demand scenarios")

    def F(xs):
        return np.array([scenario_worst_case(uset, c)[1] for c in nv.scenario_costs(xs)])

    xg, it = golden_section(F, 0.0, nv.d_max)
    x, _ = _polish(F, xg, (0.0, *nv.demands))
    p, val = scenario_worst_case(uset, nv.scenario_costs(float(x[0])))
    return RobustSolution(x, val, p, it)


# ------------------------------------------------------------- portfolio


def _portfolio_objective(yhat, axes, r):
    def f(x):
        return float(-yhat @ x + r * np.linalg.norm(axes * x))
    return f


def _line_min(c: float, A: float, B: float, C: float, r: float, gmax: float) -> float:
    """argmin over [0, gmax] of ``-c g + r sqrt(A + 2 B g + C g^2)``."""
    if r == 0 or C == 0:
        return gmax if c > 0 else 0.0
    phi = lambda g: -c * g + r * math.sqrt(max(A + 2 * B * g + C * g * g, 0.0))  # noqa: E731
    # stationary points solve r (B + C g) = c sqrt(A + 2Bg + Cg^2)
    cands = [0.0, gmax]
    a2 = r * r * C * C - c * c * C
    a1 = 2 * (r * r * B * C - c * c * B)
    a0 = r * r * B * B - c * c * A
    if abs(a2) > 1e-300:
        disc = a1 * a1 - 4 * a2 * a0
        if disc >= 0:
            sq = math.sqrt(disc)
            cands += [(-a1 - sq) / (2 * a2), (-a1 + sq) / (2 * a2)]
    elif abs(a1) > 1e-300:
        cands.append(-a0 / a1)
    cands = [min(max(g, 0.0), gmax) for g in cands if math.isfinite(g)]
    return min(cands, key=lambda g: (phi(g), g))


def solve_portfolio(problem: RobustProblem, tol: float = 1e-8, max_iter: int = 100_000) -> RobustSolution:
    """Maximize the worst-case return over an ellipsoid, i.e. minimize
    ``-yhat.x + rho ||axes * x||`` over the simplex, by away-step Frank-Wolfe
    with exact line search.  Stops when the Frank-Wolfe gap is below ``tol``."""
    uset = problem.set
    yhat, axes, r = uset.ellipsoid()
    n = yhat.size
    f = _portfolio_objective(yhat, axes, r)
    k0 = int(np.argmax(yhat))
    x = np.zeros(n)
    x[k0] = 1.0
    active = {k0: 1.0}
    a2 = axes**2
    gap = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        ax = axes * x
        nrm = float(np.linalg.norm(ax))
        grad = -yhat + (r * a2 * x / nrm if nrm > 0 else 0.0)
        s = int(np.argmin(grad))
        gap = float(grad @ x - grad[s])
        if gap < tol:
            break
        v = max(active, key=lambda j: (grad[j], -j))
        fw_gain = gap
        away_gain = float(grad[v] - grad @ x)
        if fw_gain >= away_gain:
            d = -x.copy()
            d[s] += 1.0
            gmax = 1.0
            fw = True
        else:
            d = x.copy()
            d[v] -= 1.0
            av = active[v]
            gmax = av / (1.0 - av) if av < 1.0 else 0.0
            fw = False
        bd = axes * d
        g = _line_min(float(yhat @ d), float(ax @ ax), float(ax @ bd), float(bd @ bd), r, gmax)
        if g <= 0.0:
            if fw:
                break
            # drop step degenerate: remove the away vertex weight manually
            g = gmax
        x = x + g * d
        x[x < 0] = 0.0
        x /= x.sum()
        active = {j: float(x[j]) for j in np.flatnonzero(x > 1e-15)}
    else:
        raise ConvergenceError(f"portfolio solver did not converge in {max_iter} iterations (gap {gap:.3g})")
    worst = ellipsoid_maximizer(uset, -x)
    return RobustSolution(x, f(x), worst, it, {"gap": gap})


def portfolio_closed_form(yhat, scale, rho: float) -> np.ndarray:
    """KKT solution ``x ~ [yhat - nu]_+ / scale^2`` with ``||[yhat - nu]_+ / scale|| = rho``."""
    yhat = np.asarray(yhat, float)
    scale = np.asarray(scale, float)
    if rho == 0:
        x = np.zeros_like(yhat)
        x[int(np.argmax(yhat))] = 1.0
        return x
    h = lambda nu: np.linalg.norm(np.maximum(yhat - nu, 0.0) / scale) - rho  # noqa: E731
    hi = float(yhat.max())
    lo = hi - rho * float(scale.max()) * math.sqrt(yhat.size) - (hi - yhat.min()) - 1.0
    while h(lo) < 0:
        lo -= 2 * (hi - lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if h(mid) > 0:
            lo = mid
        else:
            hi = mid
    x = np.maximum(yhat - 0.5 * (lo + hi), 0.0) / scale**2
    return x / x.sum()


# --------------------------------------------------------- shortest path


def grid_edges(side: int) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """Edges in row-major node order; each node lists its east edge then its south edge."""
    edges = []
    for r in range(side):
        for c in range(side):
            if c < side - 1:
                edges.append(((r, c), (r, c + 1)))
            if r < side - 1:
                edges.append(((r, c), (r + 1, c)))
    return edges


@lru_cache(maxsize=8)
def monotone_paths(side: int) -> np.ndarray:
    """Incidence matrix (paths x edges) of all NW-to-SE east/south paths,
    rows sorted by their sorted edge-index tuples."""
    if side > MAX_GRID_SIDE:
        raise SolverError(
            f"grid_side={side} has {math.comb(2 * (side - 1), side - 1)} paths; "
            f"enumeration is limited to grid_side <= {MAX_GRID_SIDE}, use cutting_plane instead")
    index = {e: i for i, e in enumerate(grid_edges(side))}
    k = side - 1
    rows = []
    for south_steps in combinations(range(2 * k), k):
        r = c = 0
        idx = []
        for step in range(2 * k):
            if step in south_steps:
                nxt = (r + 1, c)
            else:
                nxt = (r, c + 1)
            idx.append(index[((r, c), nxt)])
            r, c = nxt
        rows.append(tuple(sorted(idx)))
    rows.sort()
    P = np.zeros((len(rows), len(index)))
    for i, idx in enumerate(rows):
        P[i, list(idx)] = 1.0
    P.setflags(write=False)
    return P


def is_monotone_path(x, side: int) -> bool:
    x = np.asarray(x)
    return bool(np.any(np.all(monotone_paths(side) == x, axis=1)))


def dp_shortest_path(costs, side: int) -> tuple[float, np.ndarray]:
    """Shortest NW-to-SE path on the grid DAG by dynamic programming (costs may be negative)."""
    costs = np.asarray(costs, dtype=float)
    index = {e: i for i, e in enumerate(grid_edges(side))}
    best = {(0, 0): (0.0, [])}
    for s in range(1, 2 * side - 1):
        for r in range(max(0, s - side + 1), min(s, side - 1) + 1):
            c = s - r
            opts = []
            if c > 0:
                v, p = best[(r, c - 1)]
                e = index[((r, c - 1), (r, c))]
                opts.append((v + costs[e], p + [e]))
            if r > 0:
                v, p = best[(r - 1, c)]
                e = index[((r - 1, c), (r, c))]
                opts.append((v + costs[e], p + [e]))
            best[(r, c)] = min(opts, key=lambda t: (t[0], sorted(t[1])))
    v, p = best[(side - 1, side - 1)]
    x = np.zeros(len(index))
    x[p] = 1.0
    return float(v), x


def _first_min(vals: np.ndarray) -> int:
    lo = vals.min()
    return int(np.flatnonzero(vals <= lo + 1e-12 * max(1.0, abs(lo)))[0])


def solve_shortest_path(problem: RobustProblem) -> RobustSolution:
    """Enumerate every monotone path and return the one with the smallest
    worst-case cost ``yhat.x + rho ||axes * x||``; ties go to the
    lexicographically smallest edge set."""
    sp, uset = problem.kind, problem.set
    if not isinstance(sp, ShortestPath):
        raise TypeError("expected a ShortestPath problem")
    P = monotone_paths(sp.grid_side)
    yhat, axes, r = uset.ellipsoid()
    if yhat.size != P.shape[1]:
        raise ValueError(f"set has {yhat.size} components, grid has {P.shape[1]} edges")
    vals = P @ yhat + r * np.sqrt(P @ axes**2)
    k = _first_min(vals)
    x = P[k].copy()
    return RobustSolution(x, float(vals[k]), ellipsoid_maximizer(uset, x), P.shape[0])


def solve(problem: RobustProblem) -> RobustSolution:
    kind = problem.kind
    if isinstance(kind, Newsvendor):
        return solve_newsvendor(problem)
    if isinstance(kind, Portfolio):
        return solve_portfolio(problem)
    if isinstance(kind, ShortestPath):
        return solve_shortest_path(problem)
    raise TypeError(f"unknown problem kind {type(kind).__name__}")


# ----------------------------------------------------------- cutting plane


def cutting_plane(g: Callable[[np.ndarray, np.ndarray], float],
                  pessimize: Callable[[np.ndarray], np.ndarray],
                  solve_master: Callable[[list[np.ndarray]], tuple[np.ndarray, float]],
                  x0: np.ndarray, tol: float = 1e-8, max_iter: int = 10_000) -> RobustSolution:
    """Solve ``min f(x)`` s.t. ``g(y, x) <= 0`` for all ``y`` in U by scenario generation.

    ``pessimize(x)`` returns a maximizer of ``g(., x)`` over U.  ``solve_master``
    minimizes over the finite scenario list and returns ``(x, value)``.  The
    loop stops once the worst violation at the master solution is ``<= tol``.
    """
    scenarios = [pessimize(np.asarray(x0, float))]
    trace, values = [], []
    for it in range(1, max_iter + 1):
        x, val = solve_master(scenarios)
        values.append(val)
        y = pessimize(x)
        viol = float(g(y, x))
        trace.append(viol)
        if viol <= tol:
            return RobustSolution(np.asarray(x), val, np.asarray(y), it,
                                  {"violation": viol, "master_values": values})
        scenarios.append(y)
    raise ConvergenceError(f"cutting plane hit {max_iter} iterations; last violations {trace[-5:]}")


def _lp(c, A_ub, b_ub, A_eq, b_eq, bounds):
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise SolverError(f"master LP failed: {res.message}")
    return res.x


def portfolio_cutting_plane(uset: UncertaintySetSpec, tol: float = 1e-8,
                            max_iter: int = 10_000) -> RobustSolution:
    """Epigraph master ``min tau`` s.t. ``-y_k.x <= tau``, ``x`` in the simplex."""
    n = uset.dim

    def master(ys):
        c = np.r_[np.zeros(n), 1.0]
        A = np.array([np.r_[-y, -1.0] for y in ys])
        z = _lp(c, A, np.zeros(len(ys)), np.r_[np.ones(n), 0.0][None, :], [1.0],
                [(0, None)] * n + [(None, None)])
        return z, float(z[-1])

    g = lambda y, z: float(-y @ z[:n] - z[-1])  # noqa: E731
    pess = lambda z: ellipsoid_maximizer(uset, -z[:n])  # noqa: E731
    x0 = np.r_[np.full(n, 1.0 / n), 0.0]
    sol = cutting_plane(g, pess, master, x0, tol, max_iter)
    x = sol.x[:n]
    return RobustSolution(x, ellipsoid_support(uset, -x), sol.inner_worst_case, sol.iterations,
                          sol.diagnostics)


def newsvendor_cutting_plane(nv: Newsvendor, uset: UncertaintySetSpec, tol: float = 1e-8,
                             max_iter: int = 10_000) -> RobustSolution:
    """Master LP over ``(x, tau, u, e)`` with ``u_j >= d_j - x`` and ``e_j >= x - d_j``
    standing in for the shortage and excess of scenario ``j``."""
    d = np.asarray(nv.demands)
    l = d.size
    nvar = 2 + 2 * l  # x, tau, u_1..u_l, e_1..e_l

    def master(ps):
        c = np.zeros(nvar)
        c[1] = 1.0
        rows, rhs = [], []
        for p in ps:
            row = np.zeros(nvar)
            row[0] = nv.c
            row[1] = -1.0
            row[2:2 + l] = nv.b * p
            row[2 + l:] = nv.h * p
            rows.append(row)
            rhs.append(0.0)
        for j in range(l):
            row = np.zeros(nvar)
            row[0] = -1.0
            row[2 + j] = -1.0
            rows.append(row)
            rhs.append(-d[j])
            row = np.zeros(nvar)
            row[0] = 1.0
            row[2 + l + j] = -1.0
            rows.append(row)
            rhs.append(d[j])
        bounds = [(0, nv.d_max), (None, None)] + [(0, None)] * (2 * l)
        z = _lp(c, np.array(rows), np.array(rhs), None, None, bounds)
        return z, float(z[1])

    pess = lambda z: scenario_worst_case(uset, nv.scenario_costs(z[0]))[0]  # noqa: E731
    g = lambda p, z: float(p @ nv.scenario_costs(z[0]) - z[1])  # noqa: E731
    sol = cutting_plane(g, pess, master, np.r_[0.0, 0.0, np.zeros(2 * l)], tol, max_iter)
    x = float(sol.x[0])
    p, val = scenario_worst_case(uset, nv.scenario_costs(x))
    return RobustSolution(np.array([x]), val, p, sol.iterations, sol.diagnostics)


# ------------------------------------------------------- robust counterpart


def _perspective_conjugate(uset: UncertaintySetSpec, w: np.ndarray, u: float) -> float:
    """``u * sum_j (wt_j l)^*(w_j / u)`` where ``(wt l)^*(v) = wt l^*(v / wt)``."""
    wt = uset.weights
    v = w / (u * wt)
    if uset.loss.name == "msev":
        conj = scaled_squared_conjugate(v, uset.center, uset.scale)
    else:
        conj = conjugate(uset.loss, v, uset.center)
    return float(u * np.sum(wt * conj))


def robust_counterpart_value(uset: UncertaintySetSpec, w, tau: float = 0.0) -> float:
    """Dual value of ``sup_{y in U} w.y - tau`` for a regression-loss set.

    For linear ``g(y) = w.y - tau`` the concave conjugate is finite only at
    ``v = w`` (where it equals ``tau``), so the dual reduces to
    ``inf_{u > 0} u * l^*(w / u) + rho * u - tau``, minimized over ``log u``.
    """
    if not uset.loss.is_regression:
        raise ValueError("robust counterpart is implemented for regression-loss sets")
    w = np.asarray(w, dtype=float)
    if w.shape != uset.center.shape:
        raise ValueError("w must match the set dimension")
    rho = uset.radius
    wt = uset.weights
    if not np.any(w):
        return -tau
    # conjugates of absolute / huber are finite only for |w_j / (u wt_j)| <= delta
    if uset.loss.name in ("absolute", "huber"):
        delta = 1.0 if uset.loss.name == "absolute" else uset.loss.delta
        u_min = float(np.max(np.abs(w) / wt)) / delta
    else:
        u_min = 0.0
    scale = float(np.max(np.abs(w) * np.maximum(uset.scale, 1.0) / wt))
    lo = math.log(u_min) if u_min > 0 else math.log(scale) - 40.0
    hi = max(lo, math.log(scale)) + 40.0

    def phi(t):
        u = math.exp(t)
        if u_min > 0:
            u = max(u, u_min)
        return _perspective_conjugate(uset, w, u) + rho * u

    res = minimize_scalar(phi, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    best = min(float(res.fun), phi(lo), phi(hi))
    if not math.isfinite(best):
        raise SolverError("dual unbounded below: the certificate is infeasible")
    return best - tau


def pessimization_value(uset: UncertaintySetSpec, w, tau: float = 0.0) -> float:
    """Primal ``sup_{y in U} w.y - tau`` for ellipsoidal and absolute-error sets."""
    w = np.asarray(w, dtype=float)
    name = uset.loss.name
    if name in ("squared", "msev"):
        return ellipsoid_support(uset, w) - tau
    if name == "absolute":
        return float(w @ uset.center + uset.radius * np.max(np.abs(w) / uset.weights)) - tau
    raise ValueError(f"no closed-form pessimization for {uset.loss}")
