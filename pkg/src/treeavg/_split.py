"""Numba kernels for the per-node split search.

Both kernels return the best total child SSE (weighted) and enough
information to materialize the split. Ties are broken toward the first
candidate encountered: the smallest threshold for numeric columns, the
shortest level prefix for categorical columns.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_INF = np.inf


@njit(cache=True)
def scan_numeric(vals, y, w, min_leaf):
    """Best binary split of a numeric column.

    Candidate thresholds are midpoints between consecutive distinct sorted
    values. Returns (children_sse, threshold); children_sse is +inf when no
    admissible split exists.
    """
    n = vals.shape[0]
    order = np.argsort(vals)

    total_sw = 0.0
    total_swy = 0.0
    total_swyy = 0.0
    for i in range(n):
        wv = w[i]
        yv = y[i]
        total_sw += wv
        total_swy += wv * yv
        total_swyy += wv * yv * yv

    best = _INF
    best_thr = np.nan
    sw = 0.0
    swy = 0.0
    swyy = 0.0
    for i in range(n - 1):
        j = order[i]
        wv = w[j]
        yv = y[j]
        sw += wv
        swy += wv * yv
        swyy += wv * yv * yv
        v = vals[j]
        v_next = vals[order[i + 1]]
        if v_next == v:
            continue
        n_left = i + 1
        n_right = n - n_left
        if n_left < min_leaf or n_right < min_leaf:
            continue
        rsw = total_sw - sw
        rswy = total_swy - swy
        rswyy = total_swyy - swyy
        sse_left = swyy - swy * swy / sw
        sse_right = rswyy - rswy * rswy / rsw
        if sse_left < 0.0:
            sse_left = 0.0
        if sse_right < 0.0:
            sse_right = 0.0
        s = sse_left + sse_right
        if s < best:
            best = s
            best_thr = 0.5 * (v + v_next)
    return best, best_thr


@njit(cache=True)
def scan_categorical(codes, y, w, n_levels, min_leaf):
    """Best binary partition of a categorical column.

    Levels present in the node are ordered by within-level mean response
    (exact for squared error); candidate splits are prefixes of that order.
    Returns (children_sse, cut, order) where order[:cut] is the left level
    set; children_sse is +inf when no admissible split exists.
    """
    n = codes.shape[0]
    cnt = np.zeros(n_levels, dtype=np.int64)
    lsw = np.zeros(n_levels)
    lswy = np.zeros(n_levels)
    lswyy = np.zeros(n_levels)
    for i in range(n):
        c = codes[i]
        wv = w[i]
        yv = y[i]
        cnt[c] += 1
        lsw[c] += wv
        lswy[c] += wv * yv
        lswyy[c] += wv * yv * yv

    present = np.empty(n_levels, dtype=np.int64)
    n_present = 0
    for c in range(n_levels):
        if cnt[c] > 0:
            present[n_present] = c
            n_present += 1
    order = present[:n_present].copy()
    if n_present < 2:
        return _INF, 0, order

    means = np.empty(n_present)
    for t in range(n_present):
        means[t] = lswy[order[t]] / lsw[order[t]]
    # insertion sort by (mean, level): deterministic under mean ties
    for t in range(1, n_present):
        mv = means[t]
        cv = order[t]
        u = t - 1
        while u >= 0 and (means[u] > mv or (means[u] == mv and order[u] > cv)):
            means[u + 1] = means[u]
            order[u + 1] = order[u]
            u -= 1
        means[u + 1] = mv
        order[u + 1] = cv

    total_sw = 0.0
    total_swy = 0.0
    total_swyy = 0.0
    total_n = 0
    for t in range(n_present):
        c = order[t]
        total_sw += lsw[c]
        total_swy += lswy[c]
        total_swyy += lswyy[c]
        total_n += cnt[c]

    best = _INF
    best_cut = 0
    sw = 0.0
    swy = 0.0
    swyy = 0.0
    n_left = 0
    for t in range(n_present - 1):
        c = order[t]
        sw += lsw[c]
        swy += lswy[c]
        swyy += lswyy[c]
        n_left += cnt[c]
        n_right = total_n - n_left
        if n_left < min_leaf or n_right < min_leaf:
            continue
        rsw = total_sw - sw
        rswy = total_swy - swy
        rswyy = total_swyy - swyy
        sse_left = swyy - swy * swy / sw
        sse_right = rswyy - rswy * rswy / rsw
        if sse_left < 0.0:
            sse_left = 0.0
        if sse_right < 0.0:
            sse_right = 0.0
        s = sse_left + sse_right
        if s < best:
            best = s
            best_cut = t + 1
    return best, best_cut, order


@njit(cache=True)
def node_stats(y, w):
    """(sum_w, weighted mean, weighted SSE) of a response slice."""
    sw = 0.0
    swy = 0.0
    swyy = 0.0
    for i in range(y.shape[0]):
        wv = w[i]
        yv = y[i]
        sw += wv
        swy += wv * yv
        swyy += wv * yv * yv
    if sw <= 0.0:
        return 0.0, 0.0, 0.0
    mean = swy / sw
    sse = swyy - swy * mean
    if sse < 0.0:
        sse = 0.0
    return sw, mean, sse
