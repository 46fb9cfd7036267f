"""Simulate the failure-demo data: Bernoulli responses with an iid N(0, 1) effect plus intercept 1."""

import csv
from pathlib import Path

import numpy as np

SEED = 20240101
N = 100

rng = np.random.default_rng(SEED)
u = rng.normal(0.0, 1.0, size=N)
eta = 1.0 + u
y = rng.binomial(1, 1.0 / (1.0 + np.exp(-eta)))
with open(Path(__file__).parent / "data.csv", "w", newline="") as fh:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["y", "ntrials", "num"])
    for i in range(N):
        w.writerow([int(y[i]), 1, i + 1])
