"""One-dimensional test simulator f(x) = 0.1 x + cos(x) on [0, 11 pi / 3]."""

import numpy as np

from .errors import DomainError

LOWER = 0.0
UPPER = 11.0 * np.pi / 3.0


def toy_1d(x):
    x = np.asarray(x, dtype=float)
    if np.any(~((x >= LOWER) & (x <= UPPER))):
        raise DomainError(f"toy_1d input outside [0, 11*pi/3]: {x}")
    out = 0.1 * x + np.cos(x)
    return float(out) if out.ndim == 0 else out
