"""Shortest-path grid: N=1000, noise 0.5, cost degree 1/2/4/6."""

from _common import run

if __name__ == "__main__":
    run("shortest_path", dict(n_values=(1000,), noise_values=(0.5,), deg_values=(1, 2, 4, 6)))
