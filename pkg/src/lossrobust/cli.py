"""Command-line entry point.

    lossrobust generate   --problem portfolio --n 1000 --out data.csv
    lossrobust train      --data data.csv --head regression --out model.txt
    lossrobust calibrate  --data data.csv --model model.txt --alpha 0.1 --out cal.csv
    lossrobust solve      --problem portfolio --data data.csv --model model.txt --calibration cal.csv --out sol.csv
    lossrobust experiment --problem portfolio --alpha 0.1,0.05 --noise 0,1 --n 1000 --out results/
    lossrobust plot       --figure results/figures/portfolio_N1000_noise0.csv --out fig.svg

Every subcommand accepts ``--config FILE`` holding ``key = value`` lines
(keys are long flag names); flags given on the command line win.
Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import bench
from .calibrate import (CalibrationResult, Method, TailoredInputs, radius_order_statistic,
                        radius_tailored)
from .lossgeom import CROSS_ENTROPY, UncertaintySetSpec, ellipsoidal_set
from .mlcore import Head, PredictorModel, TrainConfig, loss_value, predict, train
from .robustopt import (Newsvendor, Portfolio, RobustProblem, ShortestPath, solutions_to_csv,
                        solve, solve_newsvendor_batch)
from .synthgen import GenConfig, ProblemKind, generate, read_csv

log = logging.getLogger("lossrobust")

SUBCOMMANDS = ("generate", "train", "calibrate", "solve", "experiment", "plot")
REQUIRED = {
    "generate": ("problem", "n", "out"),
    "train": ("data", "head", "out"),
    "calibrate": ("data", "model", "alpha", "out"),
    "solve": ("problem", "data", "model", "calibration", "out"),
    "experiment": ("problem", "out"),
    "plot": (),
}
HEAD_METHOD = {Head.REGRESSION: "mse", Head.REGRESSION_WITH_VARIANCE: "msev", Head.SOFTMAX: "ml_ce"}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ parsing


def _alpha(text: str) -> float:
    try:
        a = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < a < 1.0:
        raise argparse.ArgumentTypeError(f"alpha must lie in (0, 1), got {text}")
    return a


def _list(conv):
    def parse(text: str):
        items = [t for t in str(text).replace(" ", "").split(",") if t]
        if not items:
            raise argparse.ArgumentTypeError("empty list")
        return tuple(conv(t) for t in items)
    parse.__name__ = f"list of {conv.__name__}"
    return parse


def _seeds(text: str) -> tuple[int, ...]:
    """``5`` means seeds 0..4; ``3,7,11`` lists them; ``2-5`` is a range."""
    text = str(text).strip()
    if "," in text:
        return _list(int)(text)
    if "-" in text:
        a, b = text.split("-", 1)
        return tuple(range(int(a), int(b) + 1))
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("seed count must be >= 1")
    return tuple(range(n))


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; command-line flags override it")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lossrobust", description="Loss-based uncertainty sets for robust optimization.")
    sub = parser.add_subparsers(dest="subcommand", metavar="{" + ",".join(SUBCOMMANDS) + "}")

    g = sub.add_parser("generate", help="write a synthetic dataset CSV")
    _common(g)
    g.add_argument("--problem", choices=[k.value for k in ProblemKind])
    g.add_argument("--n", type=int, help="training rows")
    g.add_argument("--n-val", type=int, default=0)
    g.add_argument("--n-test", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--deg", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-covariates", type=int, default=10)
    g.add_argument("--n-assets", type=int, default=5)
    g.add_argument("--grid-side", type=int, default=5)
    g.add_argument("--out")

    t = sub.add_parser("train", help="fit a predictor on the train split")
    _common(t)
    t.add_argument("--data")
    t.add_argument("--head", choices=[h.value for h in Head])
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--max-epochs", type=int, default=1000)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--learning-rate", type=float, default=1e-3)
    t.add_argument("--patience", type=int, default=10)
    t.add_argument("--out")

    c = sub.add_parser("calibrate", help="radius from the validation split")
    _common(c)
    c.add_argument("--data")
    c.add_argument("--model")
    c.add_argument("--alpha", type=_alpha)
    c.add_argument("--method", choices=["order_statistic", "tailored", "tailored_plain"], default=None,
                   help="default: tailored for regression heads, order_statistic for softmax")
    c.add_argument("--out")

    s = sub.add_parser("solve", help="robust decision for every test row")
    _common(s)
    s.add_argument("--problem", choices=[k.value for k in ProblemKind])
    s.add_argument("--data")
    s.add_argument("--model")
    s.add_argument("--calibration")
    s.add_argument("--split", choices=["train", "val", "test"], default="test")
    s.add_argument("--out")

    e = sub.add_parser("experiment", help="run a grid and write report.csv plus figure CSVs")
    _common(e)
    e.add_argument("--problem", choices=[k.value for k in ProblemKind])
    e.add_argument("--n", type=_list(int), default=(1000,))
    e.add_argument("--noise", type=_list(float), default=(0.0,))
    e.add_argument("--deg", type=_list(int), default=(1,))
    e.add_argument("--alpha", type=_list(_alpha), default=(0.1, 0.05, 0.01))
    e.add_argument("--methods", type=_list(str), default=None)
    e.add_argument("--seeds", type=_seeds, default=tuple(range(10)))
    e.add_argument("--n-test", type=int, default=None)
    e.add_argument("--val-ratio", type=float, default=0.5)
    e.add_argument("--classical-calibration", choices=["bound", "order_statistic"], default="bound")
    e.add_argument("--max-epochs", type=int, default=1000)
    e.add_argument("--plots", action="store_true", help="also emit SVG figures")
    e.add_argument("--out")

    pl = sub.add_parser("plot", help="SVG from a figure CSV (or every figure of a report directory)")
    _common(pl)
    pl.add_argument("--figure")
    pl.add_argument("--report-dir")
    pl.add_argument("--metric", choices=["objective", "regret"], default="objective")
    pl.add_argument("--x", choices=["alpha", "violation"], default="alpha")
    pl.add_argument("--out")
    return parser


def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    for i, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


@dataclass
class RunConfig:
    subcommand: str
    problem: str | None = None
    n_values: tuple[int, ...] = ()
    noise_values: tuple[float, ...] = ()
    deg_values: tuple[int, ...] = ()
    alphas: tuple[float, ...] = ()
    methods: tuple[str, ...] | None = None
    seeds: tuple[int, ...] = ()
    out: str | None = None
    options: dict = field(default_factory=dict)

    @property
    def grid_size(self) -> int:
        return len(self.n_values) * len(self.noise_values) * len(self.deg_values) * len(self.alphas)


def _apply_config(parser: argparse.ArgumentParser, ns: argparse.Namespace, argv: list[str]) -> argparse.Namespace:
    sp = parser._subparsers._group_actions[0].choices[ns.subcommand]  # noqa: SLF001
    cfg = read_config(ns.config)
    known = {a.dest: a for a in sp._actions}  # noqa: SLF001
    extra = []
    for k, v in cfg.items():
        if k not in known or k in ("config", "help"):
            raise UsageError(f"{ns.config}: unknown key {k!r} for '{ns.subcommand}'")
        act = known[k]
        if isinstance(act, argparse._StoreTrueAction):  # noqa: SLF001
            if v.lower() in ("1", "true", "yes"):
                extra.append(act.option_strings[-1])
        else:
            extra += [act.option_strings[-1], v]
    # config first, then the real flags so they win
    return parser.parse_args([ns.subcommand] + extra + argv[1:])


def parse_args(argv: list[str] | None = None) -> RunConfig:
    """Parse and validate; usage problems exit with status 2."""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        parser.exit(2, "lossrobust: error: a subcommand is required\n")
    ns = parser.parse_args(argv)
    if ns.subcommand is None:
        parser.error("a subcommand is required")
    if ns.config:
        try:
            ns = _apply_config(parser, ns, argv)
        except (UsageError, OSError) as exc:
            parser.error(str(exc))
    missing = [f"--{r.replace('_', '-')}" for r in REQUIRED[ns.subcommand] if getattr(ns, r, None) is None]
    if ns.subcommand == "plot" and not (ns.figure or ns.report_dir):
        missing.append("--figure or --report-dir")
    if ns.subcommand == "plot" and ns.figure and not ns.out:
        missing.append("--out")
    if missing:
        sp = parser._subparsers._group_actions[0].choices[ns.subcommand]  # noqa: SLF001
        sp.error("the following arguments are required: " + ", ".join(missing))
    opts = dict(vars(ns))
    rc = RunConfig(ns.subcommand, getattr(ns, "problem", None), out=getattr(ns, "out", None), options=opts)
    if ns.subcommand == "experiment":
        rc.n_values, rc.noise_values = tuple(ns.n), tuple(ns.noise)
        rc.deg_values = tuple(ns.deg) if ns.problem == ProblemKind.SHORTEST_PATH.value else (1,)
        rc.alphas, rc.seeds = tuple(ns.alpha), tuple(ns.seeds)
        rc.methods = tuple(ns.methods) if ns.methods else None
        if any(n < 1 for n in rc.n_values):
            parser.error("--n values must be >= 1")
    elif ns.subcommand == "calibrate":
        rc.alphas = (ns.alpha,)
    return rc


# ------------------------------------------------------------------ plotting

PALETTE = ("#1b6ca8", "#d1495b", "#2e933c", "#edae49", "#6a4c93", "#00798c", "#8d6a9f", "#3d405b")


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def emit_plot(figure_csv: str | Path, out: str | Path | None = None, metric: str = "objective",
              x: str = "alpha", title: str | None = None) -> str:
    """One polyline per method: ``x`` (target alpha or realized violation) against ``metric``.

    Output is a pure function of the input rows, so identical input gives identical bytes.
    """
    text = Path(figure_csv).read_text() if Path(str(figure_csv)).exists() else str(figure_csv)
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise ValueError("figure CSV has no data rows")
    for col in ("method", x, metric):
        if col not in rows[0]:
            raise ValueError(f"figure CSV lacks column {col!r}")
    series: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        series.setdefault(r["method"], []).append((float(r[x]), float(r[metric])))
    for pts in series.values():
        pts.sort()
    xs = [p[0] for s in series.values() for p in s]
    ys = [p[1] for s in series.values() for p in s]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5 * (abs(x0) or 1), x1 + 0.5 * (abs(x1) or 1)
    if y1 == y0:
        y0, y1 = y0 - 0.5 * (abs(y0) or 1), y1 + 0.5 * (abs(y1) or 1)
    W, H, L, R, T, B = 520, 340, 64, 130, 30, 46
    pw, ph = W - L - R, H - T - B
    sx = lambda v: L + (v - x0) / (x1 - x0) * pw  # noqa: E731
    sy = lambda v: T + ph - (v - y0) / (y1 - y0) * ph  # noqa: E731
    xlabel = "target alpha" if x == "alpha" else "realized violation rate"
    out_lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
        'font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{L}" y1="{T + ph}" x2="{L + pw}" y2="{T + ph}" stroke="black"/>',
        f'<line x1="{L}" y1="{T}" x2="{L}" y2="{T + ph}" stroke="black"/>',
    ]
    for k in range(5):
        xv = x0 + (x1 - x0) * k / 4
        yv = y0 + (y1 - y0) * k / 4
        out_lines.append(f'<text x="{sx(xv):.2f}" y="{T + ph + 16}" text-anchor="middle">{_fmt(xv)}</text>')
        out_lines.append(f'<text x="{L - 6}" y="{sy(yv) + 4:.2f}" text-anchor="end">{_fmt(yv)}</text>')
    out_lines.append(f'<text x="{L + pw / 2:.1f}" y="{H - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    out_lines.append(f'<text x="14" y="{T + ph / 2:.1f}" text-anchor="middle" '
                     f'transform="rotate(-90 14 {T + ph / 2:.1f})">{escape(metric)}</text>')
    if title:
        out_lines.append(f'<text x="{L + pw / 2:.1f}" y="18" text-anchor="middle">{escape(title)}</text>')
    for i, name in enumerate(sorted(series)):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in series[name])
        out_lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = T + 14 + 16 * i
        out_lines.append(f'<rect x="{L + pw + 12}" y="{ly - 8}" width="12" height="3" fill="{color}"/>')
        out_lines.append(f'<text x="{L + pw + 30}" y="{ly}">{escape(name)}</text>')
    out_lines.append("</svg>")
    svg = "\n".join(out_lines) + "\n"
    if out is not None:
        Path(out).write_text(svg)
    return svg


def plot_report_dir(report_dir: str | Path, x: str = "alpha") -> list[Path]:
    """SVGs for both metrics of every figure CSV under ``report_dir/figures``."""
    figs = sorted((Path(report_dir) / "figures").glob("*.csv"))
    if not figs:
        raise ValueError(f"no figure CSVs under {report_dir}/figures")
    written = []
    suffix = "" if x == "alpha" else f"_vs_{x}"
    for f in figs:
        for metric in ("objective", "regret"):
            out = f.with_name(f"{f.stem}_{metric}{suffix}.svg")
            emit_plot(f, out, metric=metric, x=x, title=f.stem)
            written.append(out)
    return written


# ------------------------------------------------------------------ commands


def _problem_of(name: str, ds):
    kind = ProblemKind(name)
    if kind is ProblemKind.NEWSVENDOR:
        return Newsvendor()
    if kind is ProblemKind.PORTFOLIO:
        return Portfolio(ds.Y.shape[1])
    side = int(round((1 + math.sqrt(1 + 2 * ds.Y.shape[1])) / 2))
    return ShortestPath(side)


def cmd_generate(o: dict) -> None:
    cfg = GenConfig(o["problem"], o["n"], seed=o["seed"], n_covariates=o["n_covariates"], noise=o["noise"],
                    n_val=o["n_val"], n_test=o["n_test"], n_assets=o["n_assets"],
                    grid_side=o["grid_side"], deg=o["deg"])
    generate(cfg).to_csv(o["out"])


def cmd_train(o: dict) -> None:
    ds = read_csv(o["data"])
    X, Y = ds.train
    if X.shape[0] == 0:
        raise ValueError(f"{o['data']} has no train rows")
    cfg = TrainConfig(max_epochs=o["max_epochs"], batch_size=o["batch_size"], learning_rate=o["learning_rate"],
                      patience=o["patience"], seed=o["seed"])
    train(X, Y, Head(o["head"]), cfg=cfg).save(o["out"])


def _val_statistics(model: PredictorModel, X, Y):
    pred = predict(model, X)
    if model.head is Head.SOFTMAX:
        return pred, loss_value(CROSS_ENTROPY, Y, pred)
    sd = pred.std if model.head is Head.REGRESSION_WITH_VARIANCE else None
    return pred, TailoredInputs.from_residuals(Y, pred.mean, sd)


def cmd_calibrate(o: dict) -> None:
    ds = read_csv(o["data"])
    model = PredictorModel.load(o["model"])
    Xv, Yv = ds.val
    if Xv.shape[0] == 0:
        raise ValueError(f"{o['data']} has no val rows; generate with --n-val")
    _, stat = _val_statistics(model, Xv, Yv)
    method = o["method"] or ("order_statistic" if model.head is Head.SOFTMAX else "tailored")
    if model.head is Head.SOFTMAX:
        if method != "order_statistic":
            raise ValueError("softmax models are calibrated with the order statistic")
        res = radius_order_statistic(stat, o["alpha"])
    elif method == "order_statistic":
        res = radius_order_statistic(np.sqrt(stat.L_tilde.sum(axis=1)), o["alpha"])
    else:
        res = radius_tailored(stat, o["alpha"], use_lln=(method == "tailored"))
    Path(o["out"]).write_text(res.to_csv())


def cmd_solve(o: dict) -> None:
    ds = read_csv(o["data"])
    model = PredictorModel.load(o["model"])
    cal = CalibrationResult.from_csv(Path(o["calibration"]).read_text())
    X, _ = ds.part(o["split"])
    if X.shape[0] == 0:
        raise ValueError(f"{o['data']} has no {o['split']} rows")
    kind = _problem_of(o["problem"], ds)
    pred = predict(model, X)
    method = HEAD_METHOD[model.head]
    rows = []
    if isinstance(kind, Newsvendor):
        if model.head is not Head.SOFTMAX:
            raise ValueError("newsvendor needs a softmax model")
        x, val, _ = solve_newsvendor_batch(kind, pred.probs, cal.radius)
        for xi, vi in zip(x, val):
            rows.append([o["problem"], repr(cal.alpha), method, repr(cal.radius), repr(float(vi)), repr(float(xi))])
        n_dec = 1
    else:
        if model.head is Head.SOFTMAX:
            raise ValueError(f"{o['problem']} needs a regression model")
        sds = pred.std if pred.var is not None else [None] * len(pred.mean)
        for mu, sd in zip(pred.mean, sds):
            sol = solve(RobustProblem(kind, ellipsoidal_set(mu, cal.radius, sd)))
            rows.append(sol.csv_row(o["problem"], cal.alpha, method, cal.radius))
        n_dec = pred.mean.shape[1]
    Path(o["out"]).write_text(solutions_to_csv(rows, n_dec))


def cmd_experiment(rc: RunConfig) -> None:
    o = rc.options
    cfg = bench.ExperimentConfig(
        rc.problem, rc.n_values, rc.noise_values, rc.deg_values, rc.alphas,
        rc.methods, rc.seeds, o["n_test"], o["val_ratio"], TrainConfig(max_epochs=o["max_epochs"]),
        o["classical_calibration"])
    report = bench.run_experiment(cfg, workers=bench.worker_count())
    report.write(rc.out)
    if o["plots"]:
        plot_report_dir(rc.out)


def cmd_plot(o: dict) -> None:
    if o["report_dir"]:
        plot_report_dir(o["report_dir"], x=o["x"])
    if o["figure"]:
        emit_plot(o["figure"], o["out"], metric=o["metric"], x=o["x"], title=Path(o["figure"]).stem)


def main(argv: list[str] | None = None) -> int:
    rc = parse_args(argv)
    o = rc.options
    logging.basicConfig(level=logging.DEBUG if o.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if rc.subcommand == "experiment":
            cmd_experiment(rc)
        else:
            {"generate": cmd_generate, "train": cmd_train, "calibrate": cmd_calibrate,
             "solve": cmd_solve, "plot": cmd_plot}[rc.subcommand](o)
    except Exception as exc:  # runtime failures map to exit status 1
        print(f"lossrobust {rc.subcommand}: error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
