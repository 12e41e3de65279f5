"""Gradient of an OU semigroup without differentiating the observable.

The Bismut-Elworthy-Li estimator weights f(X_t) by a stochastic integral of
the tangent process. For f(y) = y^2 the exact gradient is 2 e^{-2t} x.

Run: python demos/bel_gradient.py
"""

import numpy as np

from flowlab.estimators import bel_gradient, observable
from flowlab.model import build_model


def main():
    model = build_model("ou", rate=1.0, sigma=1.0)
    f = observable("square", d=1)
    x = np.array([1.0])
    for t in (0.5, 1.0, 2.0):
        est = bel_gradient(model, f, 0.0, t, x, M=20000, seed=3, h=0.005)
        exact = 2 * np.exp(-2 * t) * x[0]
        print(f"t={t:.1f}  estimate {est.value[0]:.4f} +- {est.halfwidth[0]:.4f}  exact {exact:.4f}")


if __name__ == "__main__":
    main()
