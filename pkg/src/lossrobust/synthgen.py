"""Seeded synthetic generators for the newsvendor, portfolio and shortest-path
benchmarks.

All randomness flows from a single 64-bit seed through numpy's Philox
counter-based bit generator.  Independent substreams (ground-truth matrix,
covariates, noise) are derived with ``SeedSequence.spawn`` so that adding rows
never perturbs the ground truth.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

TRAIN, VAL, TEST = "train", "val", "test"
SPLITS = (TRAIN, VAL, TEST)


class ConfigError(ValueError):
    """Raised when a generator configuration violates its invariants."""


class ProblemKind(str, Enum):
    NEWSVENDOR = "newsvendor"
    PORTFOLIO = "portfolio"
    SHORTEST_PATH = "shortest_path"


@dataclass(frozen=True)
class GenConfig:
    """Configuration of one synthetic dataset.

    ``n_samples`` is the number of training rows.  Calibration (``n_val``) and
    test (``n_test``) rows are appended after them and drawn from the same law.
    """

    problem: ProblemKind
    n_samples: int
    seed: int = 0
    n_covariates: int = 10
    noise: float = 0.0
    n_val: int = 0
    n_test: int = 0
    n_assets: int = 5
    grid_side: int = 5
    deg: int = 1

    def __post_init__(self):
        object.__setattr__(self, "problem", ProblemKind(self.problem))
        if self.noise < 0 or not math.isfinite(self.noise):
            raise ConfigError(f"noise must be finite and >= 0, got {self.noise}")
        if self.n_covariates < 1:
            raise ConfigError("n_covariates must be >= 1")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.n_val < 0 or self.n_test < 0:
            raise ConfigError("n_val and n_test must be >= 0")
        if self.grid_side < 2:
            raise ConfigError("grid_side must be >= 2")
        if self.deg < 1:
            raise ConfigError("deg must be >= 1")
        if self.n_assets < 1:
            raise ConfigError("n_assets must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    @property
    def n_rows(self) -> int:
        return self.n_samples + self.n_val + self.n_test

    @property
    def n_outputs(self) -> int:
        if self.problem is ProblemKind.NEWSVENDOR:
            return 2
        if self.problem is ProblemKind.PORTFOLIO:
            return self.n_assets
        return n_grid_edges(self.grid_side)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, Y: np.ndarray) -> np.ndarray:
        return (Y - self.mean) / self.std

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        return Z * self.std + self.mean


@dataclass
class LabeledDataset:
    X: np.ndarray
    Y: np.ndarray
    split: np.ndarray
    standardizer: Standardizer | None = None
    config: GenConfig | None = field(default=None, compare=False)

    def __post_init__(self):
        self.split = np.asarray(self.split, dtype=object)
        if self.X.shape[0] != self.Y.shape[0] or self.X.shape[0] != self.split.shape[0]:
            raise ValueError("X, Y and split must have the same number of rows")
        bad = set(self.split.tolist()) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")

    def mask(self, tag: str) -> np.ndarray:
        return self.split == tag

    def part(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        m = self.mask(tag)
        return self.X[m], self.Y[m]

    @property
    def train(self):
        return self.part(TRAIN)

    @property
    def val(self):
        return self.part(VAL)

    @property
    def test(self):
        return self.part(TEST)

    def to_csv(self, path: str | Path) -> None:
        write_csv(self, path)


def n_grid_edges(side: int) -> int:
    return 2 * side * (side - 1)


def _streams(seed: int, k: int = 4) -> list[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(k)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def _bernoulli_matrix(rng: np.random.Generator, p: int, m: int) -> np.ndarray:
    # All-zero columns carry no signal and break standardization; redraw them.
    B = (rng.random((p, m)) < 0.5).astype(float)
    for j in range(m):
        while not B[:, j].any():
            B[:, j] = (rng.random(p) < 0.5).astype(float)
    return B


def _split_tags(cfg: GenConfig) -> np.ndarray:
    return np.array(
        [TRAIN] * cfg.n_samples + [VAL] * cfg.n_val + [TEST] * cfg.n_test, dtype=object
    )


def _standardize(Y: np.ndarray, split: np.ndarray) -> tuple[np.ndarray, Standardizer]:
    train = Y[split == TRAIN]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    # a constant column (possible at zero noise with one training row) stays centred only
    std = np.where(std > 0, std, 1.0)
    st = Standardizer(mean, std)
    return st.transform(Y), st


def _require(cfg: GenConfig, kind: ProblemKind) -> None:
    if cfg.problem is not kind:
        raise ConfigError(f"expected a {kind.value} configuration, got {cfg.problem.value}")


def gen_newsvendor(cfg: GenConfig) -> LabeledDataset:
    """Two-scenario demand labels driven by a noisy linear score.

    Row i is scenario 1 (low demand) iff ``q_i = (X B)_i / sqrt(p) + noise * eps_i >= 0``.
    Y is the one-hot scenario indicator and is not standardized.
    """
    _require(cfg, ProblemKind.NEWSVENDOR)
    rb, rx, re, _ = _streams(cfg.seed)
    p, n = cfg.n_covariates, cfg.n_rows
    B = _bernoulli_matrix(rb, p, 1)[:, 0]
    X = rx.standard_normal((n, p))
    eps = re.standard_normal(n)
    q = X @ B / math.sqrt(p) + cfg.noise * eps
    low = q >= 0
    Y = np.column_stack([low, ~low]).astype(float)
    return LabeledDataset(X, Y, _split_tags(cfg), None, cfg)


def gen_portfolio(cfg: GenConfig) -> LabeledDataset:
    """Asset returns ``y_ij = (X B)_ij / sqrt(p) * eps_ij`` with multiplicative
    uniform noise on ``[1 - noise, 1 + noise]``, standardized with train statistics."""
    _require(cfg, ProblemKind.PORTFOLIO)
    rb, rx, re, _ = _streams(cfg.seed)
    p, n, m = cfg.n_covariates, cfg.n_rows, cfg.n_assets
    B = _bernoulli_matrix(rb, p, m)
    X = rx.uniform(-1.0, 1.0, (n, p))
    eps = re.uniform(1.0 - cfg.noise, 1.0 + cfg.noise, (n, m))
    raw = (X @ B) / math.sqrt(p) * eps
    split = _split_tags(cfg)
    Y, st = _standardize(raw, split)
    return LabeledDataset(X, Y, split, st, cfg)


def gen_shortest_path(cfg: GenConfig) -> LabeledDataset:
    """Edge costs ``[((X B)/sqrt(p) + 3)^deg + 1] * eps`` on a square grid,
    standardized per edge with train statistics."""
    _require(cfg, ProblemKind.SHORTEST_PATH)
    rb, rx, re, _ = _streams(cfg.seed)
    p, n, m = cfg.n_covariates, cfg.n_rows, n_grid_edges(cfg.grid_side)
    B = _bernoulli_matrix(rb, p, m)
    X = rx.standard_normal((n, p))
    eps = re.uniform(1.0 - cfg.noise, 1.0 + cfg.noise, (n, m))
    raw = ((X @ B) / math.sqrt(p) + 3.0) ** cfg.deg + 1.0
    raw = raw * eps
    split = _split_tags(cfg)
    Y, st = _standardize(raw, split)
    return LabeledDataset(X, Y, split, st, cfg)


def generate(cfg: GenConfig) -> LabeledDataset:
    return {
        ProblemKind.NEWSVENDOR: gen_newsvendor,
        ProblemKind.PORTFOLIO: gen_portfolio,
        ProblemKind.SHORTEST_PATH: gen_shortest_path,
    }[cfg.problem](cfg)


def write_csv(ds: LabeledDataset, path: str | Path) -> None:
    """Write ``x1..xp,y1..ym,split``; floats use ``repr`` (shortest round-trip form)."""
    p, m = ds.X.shape[1], ds.Y.shape[1]
    header = [f"x{i + 1}" for i in range(p)] + [f"y{j + 1}" for j in range(m)] + ["split"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, y, s in zip(ds.X, ds.Y, ds.split):
            w.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in y] + [s])


def read_csv(path: str | Path) -> LabeledDataset:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = list(r)
    if not header or header[-1] != "split":
        raise ValueError(f"{path}: last column must be 'split'")
    xcols = [i for i, h in enumerate(header) if h.startswith("x")]
    ycols = [i for i, h in enumerate(header) if h.startswith("y")]
    if not xcols or not ycols:
        raise ValueError(f"{path}: header needs x* and y* columns")
    X = np.array([[float(row[i]) for i in xcols] for row in rows]).reshape(len(rows), len(xcols))
    Y = np.array([[float(row[i]) for i in ycols] for row in rows]).reshape(len(rows), len(ycols))
    split = np.array([row[-1] for row in rows], dtype=object)
    return LabeledDataset(X, Y, split)
