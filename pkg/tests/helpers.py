"""Shared test oracles: central finite differences and gradient comparison."""

from __future__ import annotations

import numpy as np


def finite_difference(f, arrays: dict[str, np.ndarray], eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar function of named arrays.

    `f` must rebuild its computation from scratch on every call so that the
    oracle stays independent of any tape being checked.
    """
    grads = {}
    for key, arr in arrays.items():
        g = np.zeros_like(arr, dtype=np.float64)
        gflat = g.reshape(-1)
        for i in range(arr.size):
            plus = {k: v.copy() for k, v in arrays.items()}
            minus = {k: v.copy() for k, v in arrays.items()}
            plus[key].reshape(-1)[i] += eps
            minus[key].reshape(-1)[i] -= eps
            gflat[i] = (f(plus) - f(minus)) / (2.0 * eps)
        grads[key] = g
    return grads


def relative_error(approx: dict[str, np.ndarray], exact: dict[str, np.ndarray]) -> float:
    """Norm-wise relative error over the whole stacked gradient vector."""
    a = np.concatenate([approx[k].reshape(-1) for k in sorted(approx)])
    b = np.concatenate([exact[k].reshape(-1) for k in sorted(exact)])
    denom = max(np.linalg.norm(a), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def grads_by_name(tape_grads, name_of) -> dict[str, np.ndarray]:
    """Re-key a {Tensor: grad} dict by parameter name."""
    return {name_of[t]: g for t, g in tape_grads.items() if t in name_of}
