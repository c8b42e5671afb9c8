"""Numpy fallback for the distribution kernels.

Same math as the compiled extension (max-subtracted softmax, KL with the
0*log(0/q) = 0 convention, JSD via the two-sided KL against the midpoint
mixture).  Summation order differs from the C loop, so results may differ
from the extension in the last couple of ulps, never more.
"""

import numpy as np

BACKEND = "numpy"


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def kl_div(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0.0
    ps = p[mask]
    qs = q[mask]
    if np.any(qs == 0.0):
        return float("inf")
    return float(np.sum(ps * np.log(ps / qs)))


def js_div(p: np.ndarray, q: np.ndarray) -> float:
    m = 0.5 * (p + q)
    return 0.5 * kl_div(p, m) + 0.5 * kl_div(q, m)
