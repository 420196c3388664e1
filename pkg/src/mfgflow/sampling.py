"""Deterministic low-discrepancy samples over boxes."""

import numpy as np
from scipy.stats import qmc


def sobol_box(lower, upper, n):
    """``n`` unscrambled Sobol points in the box [lower, upper] (origin skipped)."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    m = int(np.ceil(np.log2(n + 1)))
    unit = qmc.Sobol(d=lower.size, scramble=False).random_base2(m)[1 : n + 1]
    return lower + (upper - lower) * unit
