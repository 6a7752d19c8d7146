"""Portfolio grid: N=1000, noise 0/0.1/1, all in-scope methods."""

from _common import run

if __name__ == "__main__":
    run("portfolio", dict(n_values=(1000,), noise_values=(0.0, 0.1, 1.0)))
