"""Newsvendor grid: N=1000, noise 0/0.25/0.5, learned classifier vs divergence ball."""

from _common import run

if __name__ == "__main__":
    run("newsvendor", dict(n_values=(1000,), noise_values=(0.0, 0.25, 0.5)))
