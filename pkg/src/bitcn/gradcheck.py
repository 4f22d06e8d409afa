"""Central finite-difference checks against the tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[], float], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """d f / d t by central differences, perturbing ``t.data`` in place."""
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``; 0 when both are identically zero."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> list[float]:
    """Relative error per parameter between backward() and finite differences.

    ``loss_fn`` must rebuild the graph on each call and return a scalar.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    errors = []
    for p, a in zip(params, analytic):
        n = numerical_grad(lambda: float(loss_fn().data), p, h)
        errors.append(relative_error(a, n))
    return errors
