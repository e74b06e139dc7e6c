"""Order statistics with a fixed even-n convention.

Every median in the package is the lower-middle order statistic
``sorted(x)[(n - 1) // 2]``. This keeps results bit-stable and makes the
median an actual sample value.
"""

from __future__ import annotations

import numpy as np

MAD_FLOOR = 1e-12


def lower_median(x, axis: int = 0) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        raise ValueError("median of an empty sample")
    k = (x.shape[axis] - 1) // 2
    out = np.take(np.partition(x, k, axis=axis), k, axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def mad(x, axis: int = 0) -> np.ndarray | float:
    """Median absolute deviation around the lower median, no consistency constant."""
    x = np.asarray(x, dtype=np.float64)
    med = np.expand_dims(lower_median(x, axis=axis), axis)
    return lower_median(np.abs(x - med), axis=axis)
