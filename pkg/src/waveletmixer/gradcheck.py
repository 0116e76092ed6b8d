"""Central finite-difference gradient verification.

The numerical side only ever calls the forward function, so it stays
independent of the reverse-mode sweep it is used to check.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_gradient(loss_fn, param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = loss_fn().data.item()
        flat[i] = orig - h
        lo = loss_fn().data.item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1.0) -> float:
    """Worst-entry |a - n| / max(|a|, |n|, floor).

    The unit floor keeps the measure meaningful for near-zero gradients,
    where central differences bottom out at float rounding noise.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(loss_fn, params, h: float = 1e-5, tol: float = 1e-6):
    """Backprop ``loss_fn`` once, then verify every parameter numerically.

    Returns {name: max relative error}; raises AssertionError on the first
    parameter exceeding ``tol``.
    """
    for _, p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params}
    errors = {}
    for name, p in params:
        num = numerical_gradient(loss_fn, p, h=h)
        err = max_relative_error(analytic[name], num)
        errors[name] = err
        if err > tol:
            raise AssertionError(f"gradient mismatch for {name}: rel err {err:.3e} > {tol:.1e}")
    return errors
