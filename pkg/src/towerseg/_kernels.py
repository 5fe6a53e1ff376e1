"""Fused numba loops for the memory-bound parts of training.

Sums use float64 accumulators whatever the array dtype.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def column_moments(z):
    rows, c = z.shape
    s = np.zeros(c)
    for i in range(rows):
        for j in range(c):
            s[j] += z[i, j]
    mean = s / rows
    v = np.zeros(c)
    for i in range(rows):
        for j in range(c):
            d = z[i, j] - mean[j]
            v[j] += d * d
    return mean, v / rows


@numba.njit(cache=True, fastmath=True)
def bn_relu_forward(z, mean, inv, gamma, beta):
    rows, c = z.shape
    out = np.empty_like(z)
    for i in range(rows):
        for j in range(c):
            y = (z[i, j] - mean[j]) * inv[j] * gamma[j] + beta[j]
            out[i, j] = y if y > 0 else 0.0
    return out


@numba.njit(cache=True, fastmath=True)
def bn_relu_backward(z, g, mean, inv, gamma, beta):
    """Returns (dz, dgamma, dbeta) for ``relu(gamma * xhat + beta)``."""
    rows, c = z.shape
    dgamma = np.zeros(c)
    dbeta = np.zeros(c)
    for i in range(rows):
        for j in range(c):
            xh = (z[i, j] - mean[j]) * inv[j]
            if xh * gamma[j] + beta[j] > 0:
                dgamma[j] += g[i, j] * xh
                dbeta[j] += g[i, j]
    a = gamma * inv
    b = dbeta / rows
    s = dgamma / rows
    dz = np.empty_like(z)
    for i in range(rows):
        for j in range(c):
            xh = (z[i, j] - mean[j]) * inv[j]
            gr = g[i, j] if xh * gamma[j] + beta[j] > 0 else 0.0
            dz[i, j] = (gr - b[j] - xh * s[j]) * a[j]
    return dz, dgamma, dbeta


@numba.njit(cache=True)
def max_argmax(x):
    """Max over axis 1 of ``(b, n, c)``; ties resolve to the lowest index."""
    b, n, c = x.shape
    best = np.empty((b, c), dtype=x.dtype)
    arg = np.zeros((b, c), dtype=np.int64)
    for k in range(b):
        for j in range(c):
            best[k, j] = x[k, 0, j]
        for i in range(1, n):
            for j in range(c):
                v = x[k, i, j]
                if v > best[k, j]:
                    best[k, j] = v
                    arg[k, j] = i
    return best, arg


@numba.njit(cache=True)
def scatter_max_grad(grad, arg, n):
    b, c = grad.shape
    out = np.zeros((b, n, c), dtype=grad.dtype)
    for k in range(b):
        for j in range(c):
            out[k, arg[k, j], j] = grad[k, j]
    return out
