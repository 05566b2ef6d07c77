"""Sweep β at two budgets and report which β trains the best downstream classifier.

At one sample per class the contextual term is identically zero, so every β
gives the same set and the tie rule reports β = 0. With ten samples per class
some spread pays off.

Run with ``python demos/beta_ipc_sweep.py`` (about 2 minutes), or the same
through the command line: ``igdslab sweep --config demos/toy.ini --out runs/toy``.
"""
from pathlib import Path

from igdslab import experiment as ex

cfg = ex.load_config(Path(__file__).with_name("toy.ini"))
report = ex.run_experiment(cfg)
print(report.to_csv(), end="")
print()
print(ex.format_sweep(ex.beta_sweep(report)))
for seed in cfg.seeds:
    s = ex.beta_sweep(report.filter(seed=seed))
    print(f"seed {seed}: best beta ipc=1 -> {s[1].best_beta:g}, ipc=10 -> {s[10].best_beta:g}")
