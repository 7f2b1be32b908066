"""Central-finite-difference verification of analytic gradients.

All analytic gradients in this package are checked against the slow,
independent route: perturb each input coordinate by +-step, difference the
scalar loss, and compare.  The error metric is the max absolute deviation
scaled by the larger of the two gradients' max magnitudes, which is robust
to near-zero individual entries.
"""

from __future__ import annotations

import numpy as np

__all__ = ["central_difference_grad", "relative_error", "DEFAULT_STEP"]

DEFAULT_STEP = 1e-3


def central_difference_grad(f, x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Numerical gradient of scalar f at x: (f(x+h) - f(x-h)) / (2h) per coordinate."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        grad.reshape(-1)[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|, tiny)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)
