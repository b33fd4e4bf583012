"""Compiled loops for the selective scan.

The transition factors exp(delta * A) are computed by numpy beforehand (its
vectorised exp is much faster than a scalar one); the loops only carry the
recurrence.
"""
from __future__ import annotations

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numpy fallback in sequence.py
    njit = None


def _forward(u, delta, dA, B, C, D, hs, store):
    nb, length, d = u.shape
    n = dA.shape[3]
    y = np.empty_like(u)
    h = np.empty(n, dtype=u.dtype)
    for b in range(nb):
        for c in range(d):
            h[:] = 0
            for t in range(length):
                dt = delta[b, t, c]
                du = dt * u[b, t, c]
                acc = du * 0
                for k in range(n):
                    h[k] = dA[b, t, c, k] * h[k] + du * B[b, t, k]
                    acc += h[k] * C[b, t, k]
                    if store:
                        hs[b, t, c, k] = h[k]
                y[b, t, c] = acc + D[c] * u[b, t, c]
    return y


def _backward(g, u, delta, A, dA, B, C, D, hs):
    nb, length, d = u.shape
    n = A.shape[1]
    gu = np.empty_like(u)
    gdelta = np.empty_like(u)
    gA = np.zeros_like(A)
    gB = np.zeros_like(B)
    gC = np.zeros_like(C)
    gD = np.zeros_like(D)
    gh = np.empty(n, dtype=u.dtype)
    for b in range(nb):
        for c in range(d):
            gh[:] = 0
            for t in range(length - 1, -1, -1):
                gy = g[b, t, c]
                dt = delta[b, t, c]
                ut = u[b, t, c]
                s_delta = dt * 0
                s_u = dt * 0
                tp = t - 1 if t > 0 else 0
                live = 1 if t > 0 else 0
                for k in range(n):
                    gh[k] += gy * C[b, t, k]
                    gC[b, t, k] += gy * hs[b, t, c, k]
                    a = A[c, k]
                    da = dA[b, t, c, k]
                    hp = hs[b, tp, c, k] * live
                    gda = gh[k] * hp * da
                    s_delta += gda * a + gh[k] * B[b, t, k] * ut
                    gA[c, k] += gda * dt
                    s_u += gh[k] * B[b, t, k]
                    gB[b, t, k] += gh[k] * dt * ut
                    gh[k] *= da
                gdelta[b, t, c] = s_delta
                gu[b, t, c] = s_u * dt + gy * D[c]
                gD[c] += gy * ut
    return gu, gdelta, gA, gB, gC, gD


if njit is not None:
    forward = njit(cache=True, fastmath=True)(_forward)
    backward = njit(cache=True, fastmath=True)(_backward)
else:  # pragma: no cover
    forward = backward = None
