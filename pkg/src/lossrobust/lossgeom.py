"""Prediction losses viewed as geometry: evaluation, sublevel-set membership,
convex conjugates, multi-loss weighting and the divergence equivalences for
classification losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PROB_FLOOR = 1e-300

REGRESSION_LOSSES = ("squared", "absolute", "huber")
CLASSIFICATION_LOSSES = ("cross_entropy", "hinge", "misclassification")
ALL_LOSSES = REGRESSION_LOSSES + CLASSIFICATION_LOSSES + ("msev",)


@dataclass(frozen=True)
class LossKind:
    name: str
    delta: float = 1.0

    def __post_init__(self):
        if self.name not in ALL_LOSSES:
            raise ValueError(f"unknown loss {self.name!r}; expected one of {ALL_LOSSES}")
        if not self.delta > 0:
            raise ValueError("huber delta must be > 0")

    def __str__(self):
        return f"huber({self.delta:g})" if self.name == "huber" else self.name

    @property
    def is_regression(self) -> bool:
        return self.name in REGRESSION_LOSSES or self.name == "msev"

    @classmethod
    def parse(cls, text: str) -> "LossKind":
        text = text.strip().lower()
        if text.startswith("huber"):
            inner = text[5:].strip("() ")
            return cls("huber", float(inner) if inner else 1.0)
        aliases = {"mse": "squared", "squared_error": "squared", "mae": "absolute",
                   "absolute_error": "absolute", "ce": "cross_entropy", "crossentropy": "cross_entropy"}
        return cls(aliases.get(text, text))


SQUARED = LossKind("squared")
ABSOLUTE = LossKind("absolute")
CROSS_ENTROPY = LossKind("cross_entropy")
HINGE = LossKind("hinge")
MISCLASSIFICATION = LossKind("misclassification")
MSEV = LossKind("msev")


def huber(delta: float = 1.0) -> LossKind:
    return LossKind("huber", delta)


def componentwise_loss(kind: LossKind, y, yhat, scale=None) -> np.ndarray:
    """Per-component loss values; summing the last axis gives the loss.

    For ``msev`` the per-component value is ``((y - yhat)/scale)**2 + log(scale**2)``
    (the training loss); set membership drops the log term, see :class:`UncertaintySetSpec`.
    Classification losses take probability (or label) vectors for ``yhat``.
    """
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    name = kind.name
    if name == "squared":
        return (y - yhat) ** 2
    if name == "absolute":
        return np.abs(y - yhat)
    if name == "huber":
        r = np.abs(y - yhat)
        d = kind.delta
        return np.where(r <= d, 0.5 * r**2, d * r - 0.5 * d**2)
    if name == "msev":
        s = np.ones_like(yhat) if scale is None else np.asarray(scale, dtype=float)
        return ((y - yhat) / s) ** 2 + np.log(s**2)
    if name == "cross_entropy":
        return -y * np.log(np.maximum(yhat, PROB_FLOOR))
    if name == "hinge":
        return np.maximum(0.0, 1.0 - (2 * y - 1) * (2 * yhat - 1))
    if name == "misclassification":
        return (y != yhat).astype(float)
    raise AssertionError(name)


def loss(kind: LossKind, y, yhat, scale=None) -> float | np.ndarray:
    return componentwise_loss(kind, y, yhat, scale).sum(axis=-1)


def _is_one_hot(y: np.ndarray) -> bool:
    return bool(np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1))


@dataclass(frozen=True)
class UncertaintySetSpec:
    """Sublevel set ``{y : sum_j w_j * l(y_j, yhat_j) <= radius}`` of a loss.

    ``scale`` is the predicted standard deviation for ``msev`` sets and is
    ignored by the other losses.  For msev the constant ``sum log scale**2``
    is absorbed into the radius, so membership reads
    ``sum_j w_j ((y_j - yhat_j)/scale_j)**2 <= radius``.  ``weights`` are the
    per-component loss weights produced by :func:`combine_losses`.
    """

    loss: LossKind
    center: np.ndarray
    radius: float
    scale: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        object.__setattr__(self, "center", c)
        m = c.shape[-1]
        s = np.ones(m) if self.scale is None else np.broadcast_to(np.asarray(self.scale, float), (m,)).copy()
        w = np.ones(m) if self.weights is None else np.broadcast_to(np.asarray(self.weights, float), (m,)).copy()
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "weights", w)
        if not self.radius >= 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        if np.any(s <= 0):
            raise ValueError("scale must be strictly positive")
        if np.any(w <= 0):
            raise ValueError("weights must be strictly positive")
        if self.loss.name == "cross_entropy" and abs(c.sum() - 1.0) > 1e-9:
            raise ValueError("cross-entropy center must be a probability vector")

    @property
    def dim(self) -> int:
        return self.center.shape[-1]

    def value(self, y) -> float:
        """Weighted loss of ``y`` against the center."""
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.dim:
            raise ValueError(f"dimension mismatch: set has {self.dim}, point has {y.shape[-1]}")
        if self.loss.name == "msev":
            comp = ((y - self.center) / self.scale) ** 2
        else:
            comp = componentwise_loss(self.loss, y, self.center, self.scale)
        return float(np.sum(self.weights * comp))

    # Ellipsoidal view: {y : ||(y - center) / axes||_2 <= norm_radius}.
    def ellipsoid(self) -> tuple[np.ndarray, np.ndarray, float]:
        """Return ``(center, axes, norm_radius)`` for squared-error and msev sets."""
        if self.loss.name == "squared":
            axes = 1.0 / np.sqrt(self.weights)
        elif self.loss.name == "msev":
            axes = self.scale / np.sqrt(self.weights)
        else:
            raise ValueError(f"{self.loss} set is not an ellipsoid")
        return self.center, axes, math.sqrt(self.radius)

    def to_text(self) -> str:
        fmt = lambda a: " ".join(repr(float(v)) for v in np.ravel(a))  # noqa: E731
        return "\n".join([
            f"loss={self.loss}",
            f"rho={self.radius!r}",
            f"center={fmt(self.center)}",
            f"scale={fmt(self.scale)}",
            f"weights={fmt(self.weights)}",
        ]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "UncertaintySetSpec":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
        vec = lambda s: np.array([float(t) for t in s.split()])  # noqa: E731
        return cls(LossKind.parse(kv["loss"]), vec(kv["center"]), float(kv["rho"]),
                   vec(kv["scale"]), vec(kv["weights"]))


def ellipsoidal_set(center, norm_radius: float, scale=None) -> UncertaintySetSpec:
    """Set ``||(y - center)/scale||_2 <= norm_radius`` as a loss sublevel set.

    Without ``scale`` this is a squared-error set, otherwise an msev set; the
    loss radius is ``norm_radius**2`` either way.
    """
    if norm_radius < 0:
        raise ValueError("norm_radius must be >= 0")
    kind = SQUARED if scale is None else MSEV
    return UncertaintySetSpec(kind, center, float(norm_radius) ** 2, scale)


def member(uset: UncertaintySetSpec, y) -> bool:
    """True iff ``y`` lies in the set.

    Cross-entropy sets are defined over realized one-hot labels; misclassification
    sets compare label vectors by Hamming distance against ``floor(radius)``.
    """
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != uset.dim:
        raise ValueError(f"dimension mismatch: set has {uset.dim}, point has {y.shape[-1]}")
    name = uset.loss.name
    if name == "cross_entropy":
        if not _is_one_hot(y):
            raise ValueError("cross-entropy membership is defined for one-hot labels only")
        return uset.value(y) <= uset.radius
    if name == "misclassification":
        return float(np.sum(uset.weights * (y != uset.center))) <= math.floor(uset.radius)
    return uset.value(y) <= uset.radius


def conjugate(kind: LossKind, v, yhat) -> np.ndarray | float:
    """Convex conjugate ``sup_y { v*y - l(y, yhat) }`` of a scalar regression loss.

    Returns ``+inf`` outside the domain.
    """
    v = np.asarray(v, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    name = kind.name
    if name == "squared":
        out = yhat * v + v**2 / 4.0
    elif name == "absolute":
        out = np.where(np.abs(v) <= 1.0, yhat * v, np.inf)
    elif name == "huber":
        out = np.where(np.abs(v) <= kind.delta, yhat * v + v**2 / 2.0, np.inf)
    else:
        raise ValueError(f"conjugate is only tabulated for regression losses, not {kind}")
    return out if out.ndim else float(out)


def scaled_squared_conjugate(v, yhat, scale):
    """Conjugate of ``((y - yhat)/scale)**2`` in ``y``."""
    v, yhat, scale = (np.asarray(a, dtype=float) for a in (v, yhat, scale))
    return yhat * v + scale**2 * v**2 / 4.0


@dataclass(frozen=True)
class CombinedLossWeights:
    expected_losses: np.ndarray
    tasks: tuple[int, ...]
    weights: np.ndarray = field(init=False)

    def __post_init__(self):
        e = np.asarray(self.expected_losses, dtype=float)
        if np.any(~(e > 0)):
            raise ValueError("every block needs a strictly positive expected loss")
        if any(t not in (1, 2) for t in self.tasks) or len(self.tasks) != e.size:
            raise ValueError("tasks must hold one flag in {1, 2} per block")
        object.__setattr__(self, "expected_losses", e)
        object.__setattr__(self, "weights", 1.0 / e)

    @property
    def sigma2(self) -> np.ndarray:
        """Optimal homoscedastic weights: ``E[l_j]`` (regression) or ``2 E[l_j]`` (classification)."""
        return np.asarray(self.tasks, dtype=float) * self.expected_losses

    @property
    def radius_offset(self) -> float:
        """Constant ``sum_j eps_j log sigma_j^2`` subtracted from the combined-loss radius."""
        return float(np.sum(np.asarray(self.tasks, dtype=float) * np.log(self.sigma2)))


def combine_losses(block_losses: Sequence[tuple[LossKind, Sequence[float]]],
                   tasks: Sequence[int] | None = None) -> CombinedLossWeights:
    """Weight blocks of losses by the reciprocal of their empirical mean.

    ``tasks`` flags each block as regression (1) or classification (2); by default
    it is inferred from the loss kind.
    """
    if tasks is None:
        tasks = [1 if kind.is_regression else 2 for kind, _ in block_losses]
    means = []
    for kind, samples in block_losses:
        s = np.asarray(samples, dtype=float)
        if s.size == 0 or not np.all(np.isfinite(s)):
            raise ValueError(f"{kind}: need finite loss samples")
        mu = float(s.mean())
        if not mu > 0:
            raise ValueError(f"{kind}: mean loss is {mu}, weighting requires E[l] > 0")
        means.append(mu)
    return CombinedLossWeights(np.array(means), tuple(int(t) for t in tasks))


def kl_divergence(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.maximum(np.asarray(q, dtype=float), PROB_FLOOR)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def kl_equivalence_check(yhat, y, rho: float) -> tuple[bool, bool]:
    """Cross-entropy membership and KL-ball membership of a one-hot label."""
    y = np.asarray(y, dtype=float)
    if not _is_one_hot(y):
        raise ValueError("y must be one-hot")
    ce = float(-np.sum(y * np.log(np.maximum(np.asarray(yhat, float), PROB_FLOOR))))
    return ce <= rho, kl_divergence(y, yhat) <= rho


def hinge_equivalence_check(yhat: float, y: int) -> tuple[float, float]:
    """Hinge loss of a probability against a binary label, and twice the variation distance."""
    if not 0.0 <= yhat <= 1.0:
        raise ValueError("yhat must lie in [0, 1]")
    if y not in (0, 1):
        raise ValueError("y must be 0 or 1")
    h = max(0.0, 1.0 - (2 * y - 1) * (2 * yhat - 1))
    return h, 2.0 * abs(yhat - y)
