"""Uncertainty sets built from machine-learning losses, with calibrated radii
and robust solvers for the newsvendor, portfolio and shortest-path benchmarks."""

__version__ = "0.1.0"
