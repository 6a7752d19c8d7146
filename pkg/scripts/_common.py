"""Shared runner: build an experiment, run it, write the report and SVG figures."""

import argparse
import time
from pathlib import Path

from lossrobust.bench import ExperimentConfig, run_experiment, worker_count
from lossrobust.cli import plot_report_dir


def run(problem: str, defaults: dict) -> None:
    ap = argparse.ArgumentParser(description=f"{problem} experiment grid")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--out", default=f"results/{problem}")
    args = ap.parse_args()
    cfg = ExperimentConfig(problem, seeds=tuple(range(args.seeds)), **defaults)
    t0 = time.perf_counter()
    rep = run_experiment(cfg, workers=worker_count())
    rep.write(args.out)
    plot_report_dir(args.out)
    plot_report_dir(args.out, x="violation")
    print(f"{len(rep.rows)} rows in {time.perf_counter() - t0:.0f}s -> {Path(args.out) / 'report.csv'}")
    for r in rep.rows:
        print(f"  N={r.N} noise={r.noise:g} deg={r.deg} alpha={r.alpha:<5} {r.method:<15} "
              f"radius={r.radius:.4f} objective={r.objective:.4f} violation={r.violation:.3f}")
