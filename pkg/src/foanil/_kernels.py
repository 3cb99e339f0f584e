"""Compiled inner loops for the finite-task meta-gradients."""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def _residual_grads(x, y, v, out):
    n_tasks, m, d = x.shape
    shared = v.shape[0] == 1
    for n in range(n_tasks):
        vn = v[0] if shared else v[n]
        for e in range(d):
            out[n, e] = 0.0
        for j in range(m):
            r = -y[n, j]
            for e in range(d):
                r += x[n, j, e] * vn[e]
            r /= m
            for e in range(d):
                out[n, e] += r * x[n, j, e]
    return out


def residual_grads(x: np.ndarray, y: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-task least-squares gradients ``X_n^T (X_n v_n - y_n) / m``.

    ``v`` is either one shared ``d``-vector or a ``(n, d)`` stack.
    """
    v = np.ascontiguousarray(np.atleast_2d(v), dtype=np.float64)
    out = np.empty((x.shape[0], x.shape[2]))
    return _residual_grads(np.ascontiguousarray(x), np.ascontiguousarray(y), v, out)


@njit(cache=True, fastmath=True)
def _residual_grads_loss(x, y, v, out, sq):
    n_tasks, m, d = x.shape
    for n in range(n_tasks):
        for e in range(d):
            out[n, e] = 0.0
        acc = 0.0
        for j in range(m):
            r = -y[n, j]
            for e in range(d):
                r += x[n, j, e] * v[n, e]
            acc += r * r
            r /= m
            for e in range(d):
                out[n, e] += r * x[n, j, e]
        sq[n] = acc / m
    return out, sq


def residual_grads_and_loss(x: np.ndarray, y: np.ndarray, v: np.ndarray):
    """Like :func:`residual_grads`, also returning ``||X_n v_n - y_n||^2 / m`` per task."""
    v = np.ascontiguousarray(v, dtype=np.float64)
    n = x.shape[0]
    return _residual_grads_loss(np.ascontiguousarray(x), np.ascontiguousarray(y), v,
                                np.empty((n, x.shape[2])), np.empty(n))
