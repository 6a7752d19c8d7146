"""One-hidden-layer ReLU network with regression, heteroscedastic-regression and
softmax heads, trained by minibatch Adam with early stopping.

Everything is plain numpy so gradients can be checked against finite
differences and runs are bit-reproducible per seed.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .lossgeom import PROB_FLOOR, LossKind

log = logging.getLogger(__name__)

LOGVAR_CLAMP = 10.0
HIDDEN = 5


class Head(str, Enum):
    REGRESSION = "regression"
    REGRESSION_WITH_VARIANCE = "regression_with_variance"
    SOFTMAX = "softmax"


COMPATIBLE = {
    Head.REGRESSION: ("squared", "absolute", "huber"),
    Head.REGRESSION_WITH_VARIANCE: ("msev",),
    Head.SOFTMAX: ("cross_entropy",),
}

DEFAULT_LOSS = {
    Head.REGRESSION: LossKind("squared"),
    Head.REGRESSION_WITH_VARIANCE: LossKind("msev"),
    Head.SOFTMAX: LossKind("cross_entropy"),
}


class TrainingError(RuntimeError):
    pass


@dataclass
class Prediction:
    mean: np.ndarray
    var: np.ndarray | None = None

    @property
    def probs(self) -> np.ndarray:
        return self.mean

    @property
    def std(self) -> np.ndarray | None:
        return None if self.var is None else np.sqrt(self.var)


@dataclass
class PredictorModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    head: Head
    history: dict = field(default_factory=dict, compare=False, repr=False)

    PARAMS = ("W1", "b1", "W2", "b2")

    @property
    def n_inputs(self) -> int:
        return self.W1.shape[1]

    @property
    def n_outputs(self) -> int:
        k = self.W2.shape[0]
        return k // 2 if self.head is Head.REGRESSION_WITH_VARIANCE else k

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.PARAMS}

    def copy(self) -> "PredictorModel":
        return PredictorModel(*(getattr(self, k).copy() for k in self.PARAMS), self.head,
                              copy.deepcopy(self.history))

    def save(self, path: str | Path) -> None:
        """Flat text: ``# head=...`` then one ``name,rows,cols,v11,v12,...`` line per tensor."""
        lines = [f"# head={self.head.value}"]
        for k in self.PARAMS:
            a = np.atleast_2d(getattr(self, k))
            if k.startswith("b"):
                a = a.reshape(1, -1)
            vals = ",".join(repr(float(v)) for v in a.ravel())
            lines.append(f"{k},{a.shape[0]},{a.shape[1]},{vals}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PredictorModel":
        head, tensors = None, {}
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                if key.strip() == "head":
                    head = Head(val.strip())
                continue
            name, r, c, *vals = line.split(",")
            a = np.array([float(v) for v in vals]).reshape(int(r), int(c))
            tensors[name] = a.ravel() if name.startswith("b") else a
        if head is None or set(tensors) != set(cls.PARAMS):
            raise ValueError(f"{path}: malformed model file")
        return cls(tensors["W1"], tensors["b1"], tensors["W2"], tensors["b2"], head)


@dataclass
class TrainConfig:
    max_epochs: int = 1000
    batch_size: int = 64
    learning_rate: float = 1e-3
    patience: int = 10
    val_fraction: float = 0.3
    seed: int = 0
    warmup_epochs: int = 25
    optimizer: str = "adam"

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.max_epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("max_epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


def init_model(n_inputs: int, n_outputs: int, head: Head, seed: int = 0,
               hidden: int = HIDDEN) -> PredictorModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; the log-variance block starts at zero."""
    head = Head(head)
    rng = np.random.default_rng(seed)
    k_out = 2 * n_outputs if head is Head.REGRESSION_WITH_VARIANCE else n_outputs
    a1, a2 = 1 / math.sqrt(n_inputs), 1 / math.sqrt(hidden)
    W1 = rng.uniform(-a1, a1, (hidden, n_inputs))
    b1 = rng.uniform(-a1, a1, hidden)
    W2 = rng.uniform(-a2, a2, (k_out, hidden))
    b2 = rng.uniform(-a2, a2, k_out)
    if head is Head.REGRESSION_WITH_VARIANCE:
        W2[n_outputs:] = 0.0
        b2[n_outputs:] = 0.0
    return PredictorModel(W1, b1, W2, b2, head)


def _forward(model: PredictorModel, X: np.ndarray):
    Z1 = X @ model.W1.T + model.b1
    H = np.maximum(Z1, 0.0)
    Z2 = H @ model.W2.T + model.b2
    return Z1, H, Z2


def _softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=-1, keepdims=True)
    P = np.exp(Z)
    P /= P.sum(axis=-1, keepdims=True)
    return np.maximum(P, PROB_FLOOR)


def _outputs(model: PredictorModel, Z2: np.ndarray) -> Prediction:
    if model.head is Head.REGRESSION:
        return Prediction(Z2)
    if model.head is Head.SOFTMAX:
        return Prediction(_softmax(Z2))
    m = model.n_outputs
    s = np.clip(Z2[:, m:], -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return Prediction(Z2[:, :m], np.exp(s))


def predict(model: PredictorModel, x) -> Prediction:
    """Predict for one covariate vector or a batch (rows)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != model.n_inputs:
        raise ValueError(f"expected {model.n_inputs} covariates, got {X.shape[1]}")
    out = _outputs(model, _forward(model, X)[2])
    if single:
        return Prediction(out.mean[0], None if out.var is None else out.var[0])
    return out


def loss_value(kind: LossKind, y, pred: Prediction, diagnostics: dict | None = None):
    """Per-sample loss (sum over components); vectorised over leading axes.

    Cross-entropy clamps probabilities at 1e-300 before the log and counts the
    clamped entries in ``diagnostics['clamped']``.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(pred.mean, dtype=float)
    if y.shape != mu.shape:
        raise ValueError(f"shape mismatch: target {y.shape} vs prediction {mu.shape}")
    name = kind.name
    if name == "squared":
        return np.sum((y - mu) ** 2, axis=-1)
    if name == "absolute":
        return np.sum(np.abs(y - mu), axis=-1)
    if name == "huber":
        r = np.abs(y - mu)
        d = kind.delta
        return np.sum(np.where(r <= d, 0.5 * r**2, d * r - 0.5 * d**2), axis=-1)
    if name == "msev":
        if pred.var is None:
            raise ValueError("msev needs a variance prediction")
        return np.sum((y - mu) ** 2 / pred.var + np.log(pred.var), axis=-1)
    if name == "cross_entropy":
        clamped = (mu <= PROB_FLOOR) & (y > 0)
        if diagnostics is not None:
            diagnostics["clamped"] = diagnostics.get("clamped", 0) + int(clamped.sum())
        return -np.sum(y * np.log(np.maximum(mu, PROB_FLOOR)), axis=-1)
    raise ValueError(f"loss {kind} is not trainable")


def _output_grad(model: PredictorModel, kind: LossKind, Z2: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """d(mean batch loss)/dZ2."""
    n = Z2.shape[0]
    name = kind.name
    if model.head is Head.SOFTMAX:
        return (_softmax(Z2) - Y) / n
    if model.head is Head.REGRESSION:
        r = Z2 - Y
        if name == "squared":
            return 2.0 * r / n
        if name == "absolute":
            return np.sign(r) / n
        return np.clip(r, -kind.delta, kind.delta) / n
    m = model.n_outputs
    mu, s_raw = Z2[:, :m], Z2[:, m:]
    s = np.clip(s_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    inv = np.exp(-s)
    r = mu - Y
    g_mu = 2.0 * r * inv
    g_s = (1.0 - r**2 * inv) * ((s_raw > -LOGVAR_CLAMP) & (s_raw < LOGVAR_CLAMP))
    return np.hstack([g_mu, g_s]) / n


def gradients(model: PredictorModel, X, Y, kind: LossKind | None = None) -> dict[str, np.ndarray]:
    """Exact backpropagation gradient of the mean batch loss."""
    kind = kind or DEFAULT_LOSS[model.head]
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    Z1, H, Z2 = _forward(model, X)
    G2 = _output_grad(model, kind, Z2, Y)
    gW2 = G2.T @ H
    gb2 = G2.sum(axis=0)
    GH = (G2 @ model.W2) * (Z1 > 0)
    gW1 = GH.T @ X
    gb1 = GH.sum(axis=0)
    return {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2}


def mean_loss(model: PredictorModel, X, Y, kind: LossKind | None = None) -> float:
    kind = kind or DEFAULT_LOSS[model.head]
    return float(np.mean(loss_value(kind, Y, _outputs(model, _forward(model, np.asarray(X, float))[2]))))


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class _SGD:
    def __init__(self, params, lr: float):
        self.lr = lr

    def step(self, params, grads):
        for k, g in grads.items():
            params[k] -= self.lr * g


def train(X, Y, head: Head | str, loss: LossKind | None = None,
          cfg: TrainConfig | None = None) -> PredictorModel:
    """Fit a network on ``(X, Y)`` and return the best-validation snapshot.

    A ``cfg.val_fraction`` share of the rows, drawn with ``cfg.seed``, is held
    out for early stopping; training ends once the held-out loss has not
    improved for ``cfg.patience`` epochs.  With a variance head the first
    ``cfg.warmup_epochs`` fit the mean only (log-variance frozen at 0) and do
    not count towards early stopping.
    """
    head = Head(head)
    cfg = cfg or TrainConfig()
    loss = loss or DEFAULT_LOSS[head]
    if loss.name not in COMPATIBLE[head]:
        raise ValueError(f"loss {loss} is incompatible with head {head.value}")
    X = np.asarray(X, float)
    Y = np.asarray(Y, float)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least two training rows")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(cfg.val_fraction * n))), n - 1)
    vi, ti = perm[:n_val], perm[n_val:]
    Xt, Yt, Xv, Yv = X[ti], Y[ti], X[vi], Y[vi]

    m_out = Y.shape[1]
    model = init_model(X.shape[1], m_out, head, seed=int(rng.integers(2**63)))
    params = {k: getattr(model, k) for k in model.PARAMS}
    opt = _Adam(params, cfg.learning_rate) if cfg.optimizer == "adam" else _SGD(params, cfg.learning_rate)
    warm = cfg.warmup_epochs if head is Head.REGRESSION_WITH_VARIANCE else 0

    hist = {"train": [], "val": [], "best_epoch": None}
    best, best_val, stale = model.copy(), math.inf, 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(ti))
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            g = gradients(model, Xt[b], Yt[b], loss)
            if epoch < warm:
                g["W2"][m_out:] = 0.0
                g["b2"][m_out:] = 0.0
            opt.step(params, g)
        tr = mean_loss(model, Xt, Yt, loss)
        va = mean_loss(model, Xv, Yv, loss)
        if not (math.isfinite(tr) and math.isfinite(va)):
            raise TrainingError(
                f"non-finite loss at epoch {epoch} (train={tr}, val={va}); "
                "the learning rate may be too high or the data degenerate")
        hist["train"].append(tr)
        hist["val"].append(va)
        if epoch < warm:
            best = model.copy()
            continue
        if va < best_val:
            best_val, best, stale = va, model.copy(), 0
            hist["best_epoch"] = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if cfg.max_epochs == 0:
        best = model
    best.history = hist
    log.debug("trained %s: %d epochs, best val %.4g", head.value, len(hist["val"]), best_val)
    return best


def train_dataset(ds, head: Head | str, loss: LossKind | None = None,
                  cfg: TrainConfig | None = None) -> PredictorModel:
    """Train on the ``train`` split of a :class:`~lossrobust.synthgen.LabeledDataset`."""
    X, Y = ds.train
    if X.shape[0] == 0:
        raise ValueError("dataset has no training rows")
    return train(X, Y, head, loss, cfg)
