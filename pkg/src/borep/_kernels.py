"""Fused inner loops for projected SGD with iterate averaging.

The epoch and periodic-update loops run millions of tiny steps; for problems
whose lower-level gradient is affine in y with additive Gaussian noise the
recursion is executed by a jitted kernel consuming pre-drawn noise chunks.
A numpy fallback with the same step semantics keeps the package usable when
numba is unavailable.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def deco(fn):
            return fn

        return deco


@njit(cache=True)
def _psgd_chunk_jit(Y, center, acc, noise, A, b, alpha, radius, noise_scale, steps):
    # One projected-SGD step per t: y <- Pi_B(center, radius)(y - alpha * grad),
    # grad = A y - b + noise_scale * eps, accumulating post-step iterates in acc.
    B, d = Y.shape
    r2 = radius * radius
    g = np.empty(d)
    for t in range(steps):
        for i in range(B):
            for r in range(d):
                acc_g = -b[i, r]
                for c in range(d):
                    acc_g += A[r, c] * Y[i, c]
                if noise_scale != 0.0:
                    acc_g += noise_scale * noise[t, i, r]
                g[r] = acc_g
            nrm2 = 0.0
            for r in range(d):
                Y[i, r] -= alpha * g[r]
                dr = Y[i, r] - center[i, r]
                nrm2 += dr * dr
            if nrm2 > r2:
                s = radius / np.sqrt(nrm2)
                for r in range(d):
                    Y[i, r] = center[i, r] + s * (Y[i, r] - center[i, r])
            for r in range(d):
                acc[i, r] += Y[i, r]
    return 0


def _psgd_chunk_numpy(Y, center, acc, noise, A, b, alpha, radius, noise_scale, steps):
    r2 = radius * radius
    at = A.T.copy()
    for t in range(steps):
        g = Y @ at - b
        if noise_scale != 0.0:
            g += noise_scale * noise[t]
        Y -= alpha * g
        delta = Y - center
        nrm2 = np.einsum("ij,ij->i", delta, delta)
        mask = nrm2 > r2
        if np.any(mask):
            s = radius / np.sqrt(nrm2[mask])
            Y[mask] = center[mask] + delta[mask] * s[:, None]
        acc += Y
    return 0


psgd_chunk = _psgd_chunk_jit if HAVE_NUMBA else _psgd_chunk_numpy

#: target float count per pre-drawn noise chunk (fixed so that chunk
#: boundaries, and hence the noise layout, never depend on the environment)
CHUNK_VALUES = 1 << 20
