"""Moments of the gap between two OU flows driven by the same noise.

Simulates the pair (rate 1, sigma 1) and (rate 1, sigma 0.5) on common
Brownian increments and compares E|X_t - Xbar_t|^2 with its closed form.
The gap saturates instead of growing with t.

Run: python demos/difference_moments.py
"""

import numpy as np

from flowlab.estimators import flow_difference_moments
from flowlab.model import ModelPair, build_model
from flowlab.oracle import LinearOracle, oracle_difference_moment


def main():
    base, pert = build_model("ou", rate=1.0, sigma=1.0), build_model("ou", rate=1.0, sigma=0.5)
    pair = ModelPair(base, pert)
    x = np.array([1.0])
    times = [0.5, 1.0, 2.0, 4.0, 8.0]
    ests = flow_difference_moments(pair, 0.0, times, x, 2, 4096, 0.01, seed=11)
    A, B = LinearOracle.from_model(base), LinearOracle.from_model(pert)
    print(f"{'t':>5} {'estimate':>10} {'stderr':>9} {'exact':>9}")
    for t, e in zip(times, ests):
        exact = oracle_difference_moment(A, B, 2, 0.0, t, x)
        print(f"{t:5.1f} {e.value:10.5f} {e.stderr:9.5f} {exact:9.5f}")


if __name__ == "__main__":
    main()
