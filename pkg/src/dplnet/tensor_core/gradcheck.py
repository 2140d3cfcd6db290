"""Central finite differences, the independent oracle for ``backward``."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        value = value.data
    return float(np.asarray(value, dtype=np.float64).reshape(()))


def finite_diff_grad(f, param: Tensor, step: float = 1e-4, indices=None) -> np.ndarray:
    """Estimate d f / d param by ``(f(p+h) - f(p-h)) / 2h`` per coordinate.

    ``param.data`` is temporarily promoted to float64 and perturbed in place,
    so ``f`` must read the parameter through the same object.  With
    ``indices`` (flat positions) only those coordinates are probed and a 1-D
    array is returned; otherwise the full gradient shape is returned.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    original = param.data
    work = original.astype(np.float64, copy=True)
    param.data = work
    flat = work.reshape(-1)
    positions = range(flat.size) if indices is None else [int(i) for i in indices]
    out = np.empty(len(positions), dtype=np.float64)
    try:
        for n, i in enumerate(positions):
            keep = flat[i]
            flat[i] = keep + step
            fp = _scalar(f())
            flat[i] = keep - step
            fm = _scalar(f())
            flat[i] = keep
            out[n] = (fp - fm) / (2.0 * step)
    finally:
        param.data = original
    return out.reshape(original.shape) if indices is None else out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Max absolute disagreement scaled by the larger of the two max-norms."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)
