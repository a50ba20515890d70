"""Hot inner loops, in a numba flavour and a pure-numpy flavour.

The numba versions are selected by default.  Set ``HETDIFF_DISABLE_NUMBA=1``
to force the numpy path (useful for debugging and for the backend
comparison benchmark).  Both flavours accumulate in entry order, so the
scatter kernels agree bit for bit.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "BACKEND",
    "coo_scatter",
    "coo_entry_dot",
    "segment_softmax",
    "segment_softmax_grad",
    "np_coo_scatter",
    "np_coo_entry_dot",
    "np_segment_softmax",
    "np_segment_softmax_grad",
]


# ---------------------------------------------------------------------------
# numpy flavour
# ---------------------------------------------------------------------------


def np_coo_scatter(rows, cols, vals, x, n_rows):
    """out[rows[e]] += vals[e] * x[cols[e]], sequentially in entry order."""
    out = np.zeros((n_rows, x.shape[1]), dtype=np.float64)
    if len(rows):
        np.add.at(out, rows, vals[:, None] * x[cols])
    return out


def np_coo_entry_dot(rows, cols, g, x):
    """Per-entry dot product g[rows[e]] . x[cols[e]]."""
    if not len(rows):
        return np.zeros(0, dtype=np.float64)
    return np.einsum("ij,ij->i", g[rows], x[cols])


def np_segment_softmax(scores, offsets):
    starts = offsets[:-1]
    lengths = np.diff(offsets)
    mx = np.repeat(np.maximum.reduceat(scores, starts), lengths)
    z = np.exp(scores - mx)
    return z / np.repeat(np.add.reduceat(z, starts), lengths)


def np_segment_softmax_grad(y, g, offsets):
    starts = offsets[:-1]
    lengths = np.diff(offsets)
    dot = np.repeat(np.add.reduceat(g * y, starts), lengths)
    return y * (g - dot)


# ---------------------------------------------------------------------------
# numba flavour
# ---------------------------------------------------------------------------

_disable = os.environ.get("HETDIFF_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _disable:
        raise ImportError("numba disabled by HETDIFF_DISABLE_NUMBA")
    from numba import njit
except ImportError:
    njit = None


if njit is not None:

    @njit(cache=True)
    def _nb_coo_scatter(rows, cols, vals, x, n_rows):
        k = x.shape[1]
        out = np.zeros((n_rows, k), dtype=np.float64)
        for e in range(rows.shape[0]):
            r = rows[e]
            c = cols[e]
            v = vals[e]
            for j in range(k):
                out[r, j] += v * x[c, j]
        return out

    @njit(cache=True)
    def _nb_coo_entry_dot(rows, cols, g, x):
        m = rows.shape[0]
        k = x.shape[1]
        out = np.zeros(m, dtype=np.float64)
        for e in range(m):
            r = rows[e]
            c = cols[e]
            acc = 0.0
            for j in range(k):
                acc += g[r, j] * x[c, j]
            out[e] = acc
        return out

    @njit(cache=True)
    def _nb_segment_softmax(scores, offsets):
        out = np.empty_like(scores)
        for s in range(offsets.shape[0] - 1):
            lo = offsets[s]
            hi = offsets[s + 1]
            mx = scores[lo]
            for i in range(lo + 1, hi):
                if scores[i] > mx:
                    mx = scores[i]
            tot = 0.0
            for i in range(lo, hi):
                out[i] = np.exp(scores[i] - mx)
                tot += out[i]
            for i in range(lo, hi):
                out[i] /= tot
        return out

    @njit(cache=True)
    def _nb_segment_softmax_grad(y, g, offsets):
        out = np.empty_like(y)
        for s in range(offsets.shape[0] - 1):
            lo = offsets[s]
            hi = offsets[s + 1]
            dot = 0.0
            for i in range(lo, hi):
                dot += g[i] * y[i]
            for i in range(lo, hi):
                out[i] = y[i] * (g[i] - dot)
        return out

    BACKEND = "numba"

    def coo_scatter(rows, cols, vals, x, n_rows):
        return _nb_coo_scatter(rows, cols, vals, np.ascontiguousarray(x), n_rows)

    def coo_entry_dot(rows, cols, g, x):
        return _nb_coo_entry_dot(rows, cols, np.ascontiguousarray(g), np.ascontiguousarray(x))

    def segment_softmax(scores, offsets):
        return _nb_segment_softmax(scores, offsets)

    def segment_softmax_grad(y, g, offsets):
        return _nb_segment_softmax_grad(y, g, offsets)

else:
    BACKEND = "numpy"
    coo_scatter = np_coo_scatter
    coo_entry_dot = np_coo_entry_dot
    segment_softmax = np_segment_softmax
    segment_softmax_grad = np_segment_softmax_grad
