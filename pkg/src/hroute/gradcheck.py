"""Central finite differences in float64, for checking analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as tn
from .tensor import Tensor


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` over the whole array.

    The floor keeps gradients that are identically zero (e.g. attention key
    biases, which softmax is invariant to) from dividing noise by noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def numerical_gradient(fn: Callable[[], float], target: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d fn / d target by central differences, perturbing ``target`` in place.

    The step is ``eps * max(1, |x|)`` per element. ``target`` must be a
    float64 array that ``fn`` reads on every call.
    """
    if target.dtype != np.float64:
        raise TypeError("finite differences need a float64 target")
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = eps * max(1.0, abs(orig))
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5) -> dict[str, float]:
    """Relative error between backprop and finite differences for every parameter.

    ``loss_fn`` must rebuild the graph from the current parameter values
    each call. Parameters must already be float64.
    """
    for p in params.values():
        p.grad = None
    tn.backward(loss_fn())
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for k, p in params.items()}

    def value() -> float:
        with tn.no_grad():
            return loss_fn().item()

    return {k: rel_error(analytic[k], numerical_gradient(value, p.data, eps)) for k, p in params.items()}
