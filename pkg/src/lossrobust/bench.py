"""Experiment orchestration: data -> models -> calibrated sets -> robust
decisions -> test metrics, aggregated over seeds into a report."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibrate import (TailoredInputs, radius_classical, radius_order_statistic,
                        radius_phi_divergence, radius_tailored)
from .lossgeom import CROSS_ENTROPY, PROB_FLOOR, UncertaintySetSpec, ellipsoidal_set
from .mlcore import Head, TrainConfig, loss_value, predict, train
from .robustopt import (Newsvendor, Portfolio, RobustProblem, ShortestPath, dp_shortest_path,
                        solve_newsvendor_batch, solve_portfolio, solve_shortest_path)
from .synthgen import GenConfig, ProblemKind, generate

log = logging.getLogger(__name__)

VIOLATION_SLACK = 1e-12
REPORT_HEADER = ("problem", "N", "noise", "deg", "alpha", "method", "radius", "objective",
                 "regret", "violation", "rig")
FIGURE_HEADER = ("method", "alpha", "violation", "objective", "regret")


class MethodKind(str, Enum):
    ML_CE = "ml_ce"
    MSE = "mse"
    MSEV = "msev"
    CLASSICAL = "classical"
    PHI_DIVERGENCE = "phi_divergence"
    KNN = "knn"


@dataclass(frozen=True)
class MethodSpec:
    kind: MethodKind
    k: int = 20

    def __post_init__(self):
        object.__setattr__(self, "kind", MethodKind(self.kind))
        if self.kind is MethodKind.KNN and self.k < 1:
            raise ValueError("kNN needs k >= 1")

    @property
    def name(self) -> str:
        return f"knn{self.k}" if self.kind is MethodKind.KNN else self.kind.value

    @classmethod
    def parse(cls, text: str) -> "MethodSpec":
        """``mse``, ``msev``, ``classical``, ``ml_ce``, ``phi_divergence``, ``knn`` or ``knn:K``."""
        text = text.strip().lower()
        if text.startswith("knn"):
            rest = text[3:].lstrip(":=")
            return cls(MethodKind.KNN, int(rest) if rest else 20)
        return cls(MethodKind(text))


DEFAULT_METHODS = {
    ProblemKind.NEWSVENDOR: (MethodSpec(MethodKind.ML_CE), MethodSpec(MethodKind.PHI_DIVERGENCE)),
    ProblemKind.PORTFOLIO: (MethodSpec(MethodKind.MSE), MethodSpec(MethodKind.MSEV),
                            MethodSpec(MethodKind.CLASSICAL), MethodSpec(MethodKind.KNN)),
    ProblemKind.SHORTEST_PATH: (MethodSpec(MethodKind.MSE), MethodSpec(MethodKind.MSEV),
                                MethodSpec(MethodKind.CLASSICAL), MethodSpec(MethodKind.KNN)),
}
ALLOWED = {
    ProblemKind.NEWSVENDOR: {MethodKind.ML_CE, MethodKind.PHI_DIVERGENCE},
    ProblemKind.PORTFOLIO: {MethodKind.MSE, MethodKind.MSEV, MethodKind.CLASSICAL, MethodKind.KNN},
    ProblemKind.SHORTEST_PATH: {MethodKind.MSE, MethodKind.MSEV, MethodKind.CLASSICAL, MethodKind.KNN},
}
DEFAULT_TEST_SIZE = {ProblemKind.NEWSVENDOR: 10_000, ProblemKind.PORTFOLIO: 100,
                     ProblemKind.SHORTEST_PATH: 100}


# ---------------------------------------------------------------- metrics


def rig(p_pos, labels, base_rate: float) -> float:
    """Relative information gain ``1 - CE(model) / CE(constant base rate)`` for binary labels."""
    if not 0.0 < base_rate < 1.0:
        raise ValueError(f"base rate must lie strictly between 0 and 1, got {base_rate}")
    p = np.clip(np.asarray(p_pos, dtype=float), PROB_FLOOR, 1.0 - 1e-16)
    y = np.asarray(labels, dtype=float)
    if p.shape != y.shape:
        raise ValueError("predictions and labels must align")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    ce_model = -np.mean(y * np.log(p) + (1 - y) * np.log1p(-p))
    ce_prior = -np.mean(y * math.log(base_rate) + (1 - y) * math.log1p(-base_rate))
    return float(1.0 - ce_model / ce_prior)


def realized_cost(x, y, problem) -> np.ndarray | float:
    """Cost of decision(s) ``x`` once ``y`` is revealed (rows are instances).

    Newsvendor ``y`` is a one-hot scenario label; portfolio cost is the
    negative return; shortest-path cost is the path length.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if isinstance(problem, Newsvendor):
        costs = problem.scenario_costs(x.reshape(y.shape[:-1]) if x.ndim else x)
        out = np.sum(costs * y, axis=-1)
    elif isinstance(problem, Portfolio):
        out = -np.sum(x * y, axis=-1)
    elif isinstance(problem, ShortestPath):
        out = np.sum(x * y, axis=-1)
    else:
        raise TypeError(f"unknown problem {problem!r}")
    return out if np.ndim(out) else float(out)


def hindsight_cost(y, problem) -> np.ndarray | float:
    """Cost of the best decision had ``y`` been known: closed form (newsvendor),
    best vertex (portfolio) or dynamic programming (shortest path)."""
    y = np.asarray(y, dtype=float)
    Y = np.atleast_2d(y)
    if isinstance(problem, Newsvendor):
        out = Y @ (problem.c * np.asarray(problem.demands))
    elif isinstance(problem, Portfolio):
        out = -Y.max(axis=1)
    elif isinstance(problem, ShortestPath):
        out = np.array([dp_shortest_path(row, problem.grid_side)[0] for row in Y])
    else:
        raise TypeError(f"unknown problem {problem!r}")
    return out if y.ndim > 1 else float(out[0])


def regret(x, y, problem) -> np.ndarray | float:
    """``cost(y, x) - min_x' cost(y, x')``."""
    r = np.asarray(realized_cost(x, y, problem)) - np.asarray(hindsight_cost(y, problem))
    return r if r.ndim else float(r)


def violation_rate(robust_values, realized) -> float:
    """Share of instances whose realized cost exceeds the robust value."""
    rv = np.asarray(robust_values, dtype=float)
    rc = np.asarray(realized, dtype=float)
    if rv.shape != rc.shape:
        raise ValueError("robust values and realized costs must align")
    if rv.size == 0:
        raise ValueError("need at least one instance")
    return float(np.mean(rc > rv + VIOLATION_SLACK))


def violation_allowance(alpha: float, n: int) -> float:
    """``alpha`` plus three binomial standard errors at ``n`` test draws."""
    return alpha + 3.0 * math.sqrt(alpha * (1 - alpha) / n)


# --------------------------------------------------------------- baselines


def _check_scale(std: np.ndarray) -> None:
    if np.any(~(std > 0)):
        raise ValueError("a target component has zero spread; the ellipsoid is degenerate")


def classical_ellipsoid_baseline(Y_train, alpha: float | None = None, Y_val=None,
                                 calibration: str = "bound") -> UncertaintySetSpec:
    """Covariate-free ellipsoid centred at the training mean, scaled by the training std.

    ``calibration="bound"`` uses ``sqrt(2 log(1/alpha))``; ``"order_statistic"``
    calibrates on the validation norms ``||(y - mean)/std||``.  Without
    ``alpha`` the set has radius 0 (center and scale only).
    """
    Y = np.asarray(Y_train, dtype=float)
    if Y.shape[0] < 2:
        raise ValueError("need at least two training rows")
    center = Y.mean(axis=0)
    scale = Y.std(axis=0, ddof=1)
    _check_scale(scale)
    if alpha is None:
        rho = 0.0
    elif calibration == "bound":
        rho = radius_classical(alpha).radius
    elif calibration == "order_statistic":
        if Y_val is None:
            raise ValueError("order-statistic calibration needs validation targets")
        z = np.linalg.norm((np.asarray(Y_val, float) - center) / scale, axis=1)
        rho = radius_order_statistic(z, alpha).radius
    else:
        raise ValueError(f"unknown calibration {calibration!r}")
    return ellipsoidal_set(center, rho, scale)


@dataclass
class KnnModel:
    """Local mean/std of the targets of the ``k`` nearest training covariates."""

    X: np.ndarray
    Y: np.ndarray
    k: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.k < 2:
            raise ValueError("kNN sets need k >= 2 neighbours for a spread estimate")
        if self.k > self.X.shape[0]:
            raise ValueError(f"k={self.k} exceeds the {self.X.shape[0]} training rows")

    def local(self, Xq) -> tuple[np.ndarray, np.ndarray]:
        Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
        d2 = (np.sum(Xq**2, axis=1)[:, None] - 2 * Xq @ self.X.T + np.sum(self.X**2, axis=1)[None, :])
        # stable order so ties resolve to the lower training index
        nn = np.argsort(d2, axis=1, kind="stable")[:, :self.k]
        T = self.Y[nn]
        center = T.mean(axis=1)
        scale = T.std(axis=1, ddof=1)
        _check_scale(scale)
        return center, scale

    def calibrate(self, X_val, Y_val, alpha: float):
        c, s = self.local(X_val)
        z = np.linalg.norm((np.asarray(Y_val, float) - c) / s, axis=1)
        return radius_order_statistic(z, alpha)


def knn_baseline(X_train, Y_train, x_query, k: int, alpha: float | None = None,
                 X_val=None, Y_val=None) -> UncertaintySetSpec:
    """Ellipsoid around the neighbours' mean, scaled by their std, with an
    order-statistic radius from validation data (radius 0 without ``alpha``)."""
    model = KnnModel(X_train, Y_train, k)
    c, s = model.local(x_query)
    rho = 0.0 if alpha is None else model.calibrate(X_val, Y_val, alpha).radius
    return ellipsoidal_set(c[0], rho, s[0])


def geomean(a, axis=-1):
    return np.exp(np.mean(np.log(a), axis=axis))


# -------------------------------------------------------------- experiments


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemKind
    n_values: tuple[int, ...] = (1000,)
    noise_values: tuple[float, ...] = (0.0,)
    deg_values: tuple[int, ...] = (1,)
    alphas: tuple[float, ...] = (0.1, 0.05, 0.01)
    methods: tuple[MethodSpec, ...] | None = None
    seeds: tuple[int, ...] = tuple(range(10))
    n_test: int | None = None
    val_ratio: float = 0.5
    train: TrainConfig = field(default_factory=TrainConfig)
    classical_calibration: str = "bound"
    n_covariates: int = 10
    n_assets: int = 5
    grid_side: int = 5

    def __post_init__(self):
        object.__setattr__(self, "problem", ProblemKind(self.problem))
        if self.methods is None:
            object.__setattr__(self, "methods", DEFAULT_METHODS[self.problem])
        object.__setattr__(self, "methods", tuple(
            m if isinstance(m, MethodSpec) else MethodSpec.parse(m) for m in self.methods))
        if self.problem is not ProblemKind.SHORTEST_PATH:
            object.__setattr__(self, "deg_values", (1,))
        for name in ("n_values", "noise_values", "deg_values", "alphas", "methods", "seeds"):
            if len(getattr(self, name)) == 0:
                raise ValueError(f"{name} must be nonempty")
        if any(not 0 < a < 1 for a in self.alphas):
            raise ValueError("every alpha must lie in (0, 1)")
        bad = [m.name for m in self.methods if m.kind not in ALLOWED[self.problem]]
        if bad:
            raise ValueError(f"methods {bad} do not apply to {self.problem.value}")
        if not 0 < self.val_ratio:
            raise ValueError("val_ratio must be > 0")

    @property
    def test_size(self) -> int:
        return self.n_test if self.n_test is not None else DEFAULT_TEST_SIZE[self.problem]

    def cells(self) -> list[tuple[int, float, int]]:
        return list(product(self.n_values, self.noise_values, self.deg_values))

    def optimization_problem(self):
        if self.problem is ProblemKind.NEWSVENDOR:
            return Newsvendor()
        if self.problem is ProblemKind.PORTFOLIO:
            return Portfolio(self.n_assets)
        return ShortestPath(self.grid_side)


@dataclass
class Outcome:
    """Per-test-instance results of one method at one alpha on one seed."""

    radius: np.ndarray
    robust: np.ndarray
    realized: np.ndarray
    regret: np.ndarray
    rig: float | None = None


class CellError(RuntimeError):
    pass


def _solve_regression(kind, sets: Sequence[UncertaintySetSpec]) -> tuple[np.ndarray, np.ndarray]:
    solver = solve_portfolio if isinstance(kind, Portfolio) else solve_shortest_path
    cache: dict[int, tuple[np.ndarray, float]] = {}
    xs, vals = [], []
    for s in sets:
        key = id(s)
        if key not in cache:
            sol = solver(RobustProblem(kind, s))
            cache[key] = (sol.x, sol.robust_value)
        xs.append(cache[key][0])
        vals.append(cache[key][1])
    return np.array(xs), np.array(vals)


def _regression_outcomes(cfg: ExperimentConfig, ds, seed: int) -> dict:
    kind = cfg.optimization_problem()
    Xtr, Ytr = ds.train
    Xv, Yv = ds.val
    Xte, Yte = ds.test
    tc = replace(cfg.train, seed=seed)
    hind = hindsight_cost(Yte, kind)
    out = {}

    def finish(sets, radii):
        x, val = _solve_regression(kind, sets)
        real = realized_cost(x, Yte, kind)
        return Outcome(np.asarray(radii, float), val, real, real - hind)

    for m in cfg.methods:
        if m.kind is MethodKind.MSE:
            model = train(Xtr, Ytr, Head.REGRESSION, cfg=tc)
            Pv, Pt = predict(model, Xv).mean, predict(model, Xte).mean
            ti = TailoredInputs.from_residuals(Yv, Pv)
            for a in cfg.alphas:
                rho = radius_tailored(ti, a).radius
                out[(a, m.name)] = finish([ellipsoidal_set(c, rho) for c in Pt], np.full(len(Pt), rho))
        elif m.kind is MethodKind.MSEV:
            model = train(Xtr, Ytr, Head.REGRESSION_WITH_VARIANCE, cfg=tc)
            pv, pt = predict(model, Xv), predict(model, Xte)
            ti = TailoredInputs.from_residuals(Yv, pv.mean, pv.std)
            for a in cfg.alphas:
                rho = radius_tailored(ti, a).radius
                sets = [ellipsoidal_set(c, rho, s) for c, s in zip(pt.mean, pt.std)]
                out[(a, m.name)] = finish(sets, rho * geomean(pt.std))
        elif m.kind is MethodKind.CLASSICAL:
            for a in cfg.alphas:
                s = classical_ellipsoid_baseline(Ytr, a, Yv, cfg.classical_calibration)
                r = math.sqrt(s.radius) * geomean(s.scale)
                out[(a, m.name)] = finish([s] * len(Xte), np.full(len(Xte), r))
        elif m.kind is MethodKind.KNN:
            knn = KnnModel(Xtr, Ytr, m.k)
            ct, st = knn.local(Xte)
            for a in cfg.alphas:
                rho = knn.calibrate(Xv, Yv, a).radius
                sets = [ellipsoidal_set(c, rho, s) for c, s in zip(ct, st)]
                out[(a, m.name)] = finish(sets, rho * geomean(st))
    return out


def _newsvendor_outcomes(cfg: ExperimentConfig, ds, seed: int) -> dict:
    nv = Newsvendor()
    Xtr, Ytr = ds.train
    Xv, Yv = ds.val
    Xte, Yte = ds.test
    hind = hindsight_cost(Yte, nv)
    out = {}
    for m in cfg.methods:
        if m.kind is MethodKind.ML_CE:
            model = train(Xtr, Ytr, Head.SOFTMAX, cfg=replace(cfg.train, seed=seed))
            ce_val = loss_value(CROSS_ENTROPY, Yv, predict(model, Xv))
            Pt = predict(model, Xte).probs
            gain = rig(Pt[:, 0], Yte[:, 0], float(Ytr[:, 0].mean()))
            for a in cfg.alphas:
                rho = radius_order_statistic(ce_val, a).radius
                x, val, _ = solve_newsvendor_batch(nv, Pt, rho)
                real = realized_cost(x, Yte, nv)
                out[(a, m.name)] = Outcome(np.full(len(x), rho), val, real, real - hind, gain)
        elif m.kind is MethodKind.PHI_DIVERGENCE:
            counts = Ytr.sum(axis=0)
            p_hat = counts / counts.sum()
            for a in cfg.alphas:
                rho = radius_phi_divergence(counts, a).radius
                x, val, _ = solve_newsvendor_batch(nv, p_hat[None, :], rho)
                xs = np.full(len(Xte), x[0])
                real = realized_cost(xs, Yte, nv)
                out[(a, m.name)] = Outcome(np.full(len(xs), rho), np.full(len(xs), val[0]),
                                           real, real - hind)
    return out


def run_cell(cfg: ExperimentConfig, n: int, noise: float, deg: int, seed: int) -> dict:
    """All methods and alphas for one grid cell and one replication seed."""
    try:
        n_val = max(1, math.ceil(cfg.val_ratio * n))
        gc = GenConfig(cfg.problem, n, seed=seed, n_covariates=cfg.n_covariates, noise=noise,
                       n_val=n_val, n_test=cfg.test_size, n_assets=cfg.n_assets,
                       grid_side=cfg.grid_side, deg=deg)
        ds = generate(gc)
        if cfg.problem is ProblemKind.NEWSVENDOR:
            return _newsvendor_outcomes(cfg, ds, seed)
        return _regression_outcomes(cfg, ds, seed)
    except Exception as exc:  # attach grid coordinates, keep the cause
        raise CellError(f"{cfg.problem.value} cell N={n} noise={noise:g} deg={deg} seed={seed}: "
                        f"{type(exc).__name__}: {exc}") from exc


@dataclass
class ReportRow:
    problem: str
    N: int
    noise: float
    deg: int | None
    alpha: float
    method: str
    radius: float
    objective: float
    regret: float
    violation: float
    rig: float | None
    n_eval: int

    def csv_row(self) -> list[str]:
        f = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        return [self.problem, str(self.N), repr(float(self.noise)),
                "" if self.deg is None else str(self.deg), repr(float(self.alpha)), self.method,
                f(self.radius), f(self.objective), f(self.regret), f(self.violation), f(self.rig)]

    @property
    def allowance(self) -> float:
        return violation_allowance(self.alpha, self.n_eval)

    @property
    def panel(self) -> str:
        if self.problem == ProblemKind.SHORTEST_PATH.value:
            return f"deg{self.deg}_noise{self.noise:g}"
        if self.problem == ProblemKind.PORTFOLIO.value:
            return f"N{self.N}_noise{self.noise:g}"
        return f"noise{self.noise:g}"


@dataclass
class ExperimentReport:
    rows: list[ReportRow]
    seeds: tuple[int, ...]
    per_seed: dict = field(default_factory=dict, repr=False)

    def select(self, **kw) -> list[ReportRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in kw.items())]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow(r.csv_row())
        return buf.getvalue()

    def figure_tables(self) -> dict[str, str]:
        """One CSV per panel: guarantee level (target alpha and realized violation) vs objective and regret."""
        panels: dict[str, list[ReportRow]] = {}
        for r in self.rows:
            panels.setdefault(f"{r.problem}_{r.panel}", []).append(r)
        out = {}
        for name, rows in panels.items():
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(FIGURE_HEADER)
            for r in sorted(rows, key=lambda r: (r.method, -r.alpha)):
                w.writerow([r.method, repr(r.alpha), repr(r.violation), repr(r.objective), repr(r.regret)])
            out[name] = buf.getvalue()
        return out

    def write(self, outdir: str | Path) -> list[Path]:
        outdir = Path(outdir)
        (outdir / "figures").mkdir(parents=True, exist_ok=True)
        paths = [outdir / "report.csv"]
        paths[0].write_text(self.to_csv())
        for name, text in sorted(self.figure_tables().items()):
            p = outdir / "figures" / f"{name}.csv"
            p.write_text(text)
            paths.append(p)
        return paths


def read_report(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty report")
    return rows


def _cell_job(args):
    cfg, n, noise, deg, seed = args
    return run_cell(cfg, n, noise, deg, seed)


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> ExperimentReport:
    """Run every (cell, seed) job and average the per-instance results.

    Jobs are independent; with ``workers > 1`` they run in separate processes.
    Aggregation order is fixed, so the report does not depend on ``workers``.
    """
    jobs = [(cfg, n, noise, deg, seed) for (n, noise, deg) in cfg.cells() for seed in cfg.seeds]
    workers = workers or 1
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            results = list(ex.map(_cell_job, jobs))
    else:
        results = [_cell_job(j) for j in jobs]

    per_seed = {}
    for (_, n, noise, deg, seed), res in zip(jobs, results):
        for (a, name), o in res.items():
            per_seed[(n, noise, deg, a, name, seed)] = o

    rows = []
    is_sp = cfg.problem is ProblemKind.SHORTEST_PATH
    for (n, noise, deg) in cfg.cells():
        for a in cfg.alphas:
            for m in cfg.methods:
                outs = [per_seed[(n, noise, deg, a, m.name, s)] for s in cfg.seeds]
                cat = lambda f: np.concatenate([getattr(o, f) for o in outs])  # noqa: E731
                rigs = [o.rig for o in outs if o.rig is not None]
                rows.append(ReportRow(
                    cfg.problem.value, n, noise, deg if is_sp else None, a, m.name,
                    float(cat("radius").mean()), float(cat("robust").mean()), float(cat("regret").mean()),
                    violation_rate(cat("robust"), cat("realized")),
                    float(np.mean(rigs)) if rigs else None, int(cat("robust").size)))
    return ExperimentReport(rows, tuple(cfg.seeds), per_seed)


def worker_count() -> int:
    """Worker cap from ``LOSSROBUST_THREADS`` (default 1)."""
    raw = os.environ.get("LOSSROBUST_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"LOSSROBUST_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def seed_violation(per_seed: dict, key) -> list[float]:
    """Per-seed violation rates for a ``(N, noise, deg, alpha, method)`` key."""
    return [violation_rate(o.robust, o.realized) for k, o in sorted(per_seed.items(), key=lambda t: t[0][-1])
            if k[:-1] == key]


__all__ = [
    "MethodKind", "MethodSpec", "ExperimentConfig", "ExperimentReport", "ReportRow", "Outcome",
    "CellError", "rig", "regret", "realized_cost", "hindsight_cost", "violation_rate",
    "violation_allowance", "classical_ellipsoid_baseline", "knn_baseline", "KnnModel",
    "run_cell", "run_experiment", "read_report", "worker_count",
]
