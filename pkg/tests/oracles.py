"""Independent reference computations used by the tests."""

import numpy as np
from scipy.optimize import brentq

from histmatch.toy import LOWER, UPPER, toy_1d


def dense_oracle(X, y, Xs, terms, coef, su2, theta, sw2, active):
    """Adjusted mean and variance written out entry by entry."""

    def g(x):
        row = []
        for t in terms:
            v = 1.0
            for i in t:
                v *= x[i]
            row.append(v)
        return np.array(row)

    def cov(a, b):
        s = 0.0
        for k, i in enumerate(active):
            s += ((a[i] - b[i]) / theta[k]) ** 2
        c = su2 * np.exp(-s)
        if np.array_equal(a, b):
            c += sw2
        return c

    n = len(X)
    K = np.array([[cov(X[i], X[j]) for j in range(n)] for i in range(n)])
    Kinv = np.linalg.inv(K)
    ED = np.array([g(x) @ coef if terms else 0.0 for x in X])
    means, vars_ = [], []
    for x in Xs:
        k = np.array([cov(x, X[j]) for j in range(n)])
        e = (g(x) @ coef if terms else 0.0) + k @ Kinv @ (y - ED)
        v = cov(x, x) - k @ Kinv @ k
        means.append(e)
        vars_.append(v)
    return np.array(means), np.array(vars_)


def toy_roots(z=-0.3, grid=20001):
    """Roots of 0.1 x + cos x = z on the toy interval by bracketing and Brent's method."""
    g = lambda x: toy_1d(x) - z
    xs = np.linspace(LOWER, UPPER, grid)
    v = g(xs)
    return [brentq(g, a, b, xtol=1e-12) for a, b, fa, fb in zip(xs[:-1], xs[1:], v[:-1], v[1:])
            if fa * fb < 0]
