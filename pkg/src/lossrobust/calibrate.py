"""Radius calibration: distribution-free order statistics, the sub-Gaussian
bound tailored to (variance-scaled) squared-error ellipsoids, and the KL
φ-divergence correction used by the covariate-free baseline."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import stats

E_HALF = math.exp(-0.5)
E_TWO = math.exp(-2.0)


class CalibrationError(ValueError):
    pass


class InsufficientSamplesError(CalibrationError):
    pass


class Method(str, Enum):
    ORDER_STATISTIC = "order_statistic"
    TAILORED_BOUND = "tailored_bound"
    PHI_DIVERGENCE = "phi_divergence"
    CLASSICAL_BOUND = "classical_bound"


@dataclass
class CalibrationResult:
    radius: float
    alpha: float
    method: Method
    index: int | None = None
    n: int | None = None
    bound_at_radius: float | None = None
    diagnostics: dict = field(default_factory=dict)

    CSV_HEADER = ("method", "alpha", "radius", "i", "N", "bound_at_radius")

    def csv_row(self) -> list[str]:
        opt = lambda v, f: "" if v is None else repr(f(v))  # noqa: E731
        return [self.method.value, repr(float(self.alpha)), repr(float(self.radius)),
                opt(self.index, int), opt(self.n, int), opt(self.bound_at_radius, float)]

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(self.CSV_HEADER)
        w.writerow(self.csv_row())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CalibrationResult":
        rows = list(csv.reader(io.StringIO(text)))
        rec = dict(zip(rows[0], rows[1]))
        opt = lambda s, f: None if s == "" else f(s)  # noqa: E731
        return cls(float(rec["radius"]), float(rec["alpha"]), Method(rec["method"]),
                   opt(rec["i"], int), opt(rec["N"], int), opt(rec["bound_at_radius"], float))


def _check_alpha(alpha: float, *, allow_one: bool = False) -> None:
    hi_ok = alpha <= 1 if allow_one else alpha < 1
    if not (0 < alpha and hi_ok):
        raise CalibrationError(f"alpha must lie in (0, 1), got {alpha}")


def order_statistic_index(n: int, alpha: float) -> int:
    """``ceil((n + 1)(1 - alpha))``, robust to representation error in ``alpha``."""
    return math.ceil(round((n + 1) * (1.0 - alpha), 9))


def radius_order_statistic(losses, alpha: float) -> CalibrationResult:
    """Radius equal to the ``ceil((N+1)(1-alpha))``-th smallest validation loss.

    Any decision robust to the resulting set violates its constraint on a new,
    independent draw with probability at most ``alpha``.  Ties are kept.
    """
    _check_alpha(alpha)
    z = np.sort(np.asarray(losses, dtype=float).ravel())
    if z.size == 0 or not np.all(np.isfinite(z)):
        raise CalibrationError("need at least one finite validation loss")
    n = z.size
    i = order_statistic_index(n, alpha)
    if i > n:
        need = math.ceil(round(1.0 / alpha - 1.0, 9))
        raise InsufficientSamplesError(
            f"alpha={alpha} needs order statistic {i} of {n} losses; "
            f"at least N={need} validation samples are required")
    return CalibrationResult(float(z[i - 1]), alpha, Method.ORDER_STATISTIC, index=i, n=n,
                             bound_at_radius=1.0 - i / (n + 1))


def q_function(t):
    """``q(t) = exp(-1/2)(1/t - 1/2) + exp(-2) - exp(-t)`` for ``t < 2``, else 0."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("q is defined for t > 0")
    with np.errstate(over="ignore"):
        out = np.where(t >= 2.0, 0.0, E_HALF * (1.0 / t - 0.5) + E_TWO - np.exp(-t))
    return out if out.ndim else float(out)


@dataclass
class TailoredInputs:
    """Normalized squared residuals ``((y_j - yhat_j)/sigma_j)**2`` of a validation set (N x m)."""

    L_tilde: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.L_tilde, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        if a.ndim != 2 or a.shape[0] < 1:
            raise ValueError("L_tilde must be an N x m matrix with N >= 1")
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise ValueError("L_tilde entries must be finite and >= 0")
        self.L_tilde = a

    @classmethod
    def from_residuals(cls, y, yhat, sigma=None) -> "TailoredInputs":
        r = np.asarray(y, float) - np.asarray(yhat, float)
        if sigma is not None:
            r = r / np.asarray(sigma, float)
        return cls(r**2)

    @property
    def t(self) -> np.ndarray:
        """Per-sample worst component ``t_m = max_j L_j``."""
        return self.L_tilde.max(axis=1)

    @property
    def L(self) -> float:
        return float(self.L_tilde.mean(axis=0).sum())

    @property
    def m(self) -> int:
        return self.L_tilde.shape[1]


def _jensen_gap(u_num: float, t: np.ndarray) -> float:
    """Empirical ``mean q(u_num / t) - q(u_num / mean t)`` with the ``1/u`` parts cancelled exactly."""
    tbar = float(t.mean())
    with np.errstate(divide="ignore", over="ignore"):
        u = u_num / t
        ubar = u_num / tbar
    live = u < 2.0
    # q(u) = e^{-1/2} t / u_num + r(u) on the live branch; the t/u_num pieces
    # nearly cancel between the mean and the plug-in term.
    lin = np.mean(np.where(live, t, 0.0)) - (tbar if ubar < 2.0 else 0.0)
    rest = np.where(live, -0.5 * E_HALF + E_TWO - np.exp(-u), 0.0).mean()
    rest_bar = (-0.5 * E_HALF + E_TWO - math.exp(-ubar)) if ubar < 2.0 else 0.0
    return E_HALF * lin / u_num + rest - rest_bar


def tailored_bound(inputs: TailoredInputs, rho: float, use_lln: bool = True) -> float:
    """Empirical violation bound for the ellipsoid ``||(y - yhat)/sigma|| <= rho``.

    LLN form: ``mean exp(-(rho^2 - L)/(2 t)) + gap`` with ``gap`` the empirical
    Jensen gap of ``q`` at ``(rho^2 - L)/t``.  Otherwise the exponent is
    ``-(rho^2/t - m)/2`` and the gap, evaluated at ``rho^2/t``, is scaled by ``exp(m/2)``.
    """
    t = inputs.t
    if use_lln:
        d = rho**2 - inputs.L
        if d < 0:
            raise CalibrationError(f"LLN bound needs rho^2 >= L = {inputs.L:.6g}, got rho^2 = {rho**2:.6g}")
        if d == 0:
            return 1.0
        if not np.any(t > 0):
            return 0.0
        with np.errstate(divide="ignore"):
            main = float(np.mean(np.exp(-d / (2.0 * t))))
        return main + _jensen_gap(d, t)
    r2 = rho**2
    if r2 <= 0:
        raise CalibrationError("rho must be > 0")
    if not np.any(t > 0):
        return 0.0
    m = inputs.m
    with np.errstate(divide="ignore"):
        main = float(np.mean(np.exp(-0.5 * (r2 / t - m))))
    return main + math.exp(m / 2.0) * _jensen_gap(r2, t)


def radius_tailored(inputs: TailoredInputs, alpha: float, use_lln: bool = True,
                    rtol: float = 1e-9) -> CalibrationResult:
    """Smallest radius whose tailored bound is at most ``alpha`` (bisection)."""
    _check_alpha(alpha, allow_one=True)
    L = inputs.L
    lo = math.sqrt(L) if use_lln else 0.0
    while use_lln and lo * lo < L:  # sqrt rounding can land just below
        lo = math.nextafter(lo, math.inf)
    hi = math.sqrt(L) * 1e3 + 1e3
    f = lambda r: tailored_bound(inputs, r, use_lln)  # noqa: E731
    if use_lln and f(lo) <= alpha:
        return CalibrationResult(lo, alpha, Method.TAILORED_BOUND, n=inputs.L_tilde.shape[0],
                                 bound_at_radius=f(lo), diagnostics={"L": L, "lln": use_lln})
    if f(hi) > alpha:
        raise CalibrationError(f"tailored bound unattainable: bound at rho={hi:.4g} is {f(hi):.4g} > {alpha}")
    if not use_lln:
        lo = max(lo, 1e-12)
    for _ in range(400):
        if hi - lo <= rtol * hi or hi < 1e-300:
            break
        mid = 0.5 * (lo + hi)
        if f(mid) <= alpha:
            hi = mid
        else:
            lo = mid
    return CalibrationResult(hi, alpha, Method.TAILORED_BOUND, n=inputs.L_tilde.shape[0],
                             bound_at_radius=f(hi),
                             diagnostics={"L": L, "mean_t": float(inputs.t.mean()), "lln": use_lln})


def chi2_quantile(level: float, dof: int) -> float:
    return float(stats.chi2.ppf(level, dof))


def radius_phi_divergence(counts, alpha: float, n_classes: int | None = None) -> CalibrationResult:
    """KL-ball radius ``chi2_{l-1, 1-alpha} / (2N)`` around an empirical distribution."""
    _check_alpha(alpha)
    counts = np.asarray(counts, dtype=float)
    n = int(round(counts.sum()))
    l = int(n_classes if n_classes is not None else counts.size)
    if n < 1 or l < 2:
        raise CalibrationError("need N >= 1 samples and at least 2 classes")
    rho = chi2_quantile(1.0 - alpha, l - 1) / (2.0 * n)
    return CalibrationResult(rho, alpha, Method.PHI_DIVERGENCE, n=n,
                             diagnostics={"classes": l})


def radius_classical(alpha: float) -> CalibrationResult:
    """``sqrt(2 log(1/alpha))``: the textbook ellipsoid radius for independent
    sub-Gaussian components with known mean and variance."""
    _check_alpha(alpha)
    return CalibrationResult(math.sqrt(2.0 * math.log(1.0 / alpha)), alpha, Method.CLASSICAL_BOUND,
                             bound_at_radius=alpha)


JENSEN_KNOT = (3.0 + math.sqrt(3.0)) / 6.0
BETA = math.exp(-1.0 / JENSEN_KNOT) * (2.0 * JENSEN_KNOT - 1.0) / JENSEN_KNOT**4


def jensen_gap_upper_bound(inputs: TailoredInputs, rho: float) -> float:
    """Conservative bound ``BETA * Var(t) / (rho^2 - L)^2`` on the Jensen gap term."""
    d = rho**2 - inputs.L
    if not d > 0:
        raise CalibrationError("need rho^2 > L")
    return BETA * float(np.var(inputs.t)) / d**2


def jensen_gap(inputs: TailoredInputs, rho: float) -> float:
    """The empirical gap term of the LLN bound at ``rho``."""
    d = rho**2 - inputs.L
    if not d > 0:
        raise CalibrationError("need rho^2 > L")
    return _jensen_gap(d, inputs.t)
