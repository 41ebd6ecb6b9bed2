"""Shared finite-difference oracles for gradient checks."""
import numpy as np


def finite_diff_grad(f, x0, h=1e-5):
    """Central-difference gradient of a scalar function of one flat array."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = grad.reshape(-1)
    xf = x0.reshape(-1)
    for i in range(xf.size):
        bump = np.zeros_like(xf)
        bump[i] = h
        flat[i] = (f((xf + bump).reshape(x0.shape))
                   - f((xf - bump).reshape(x0.shape))) / (2.0 * h)
    return grad


def max_rel_err(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
