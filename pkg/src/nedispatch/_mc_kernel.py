"""Compiled inner loop of the Monte-Carlo valuation oracle."""

import numpy as np
from numba import njit


@njit(cache=True)
def accumulate(u, p, w, ks, sums, sqs):
    """Resolve every sample row of ``u`` under each trigger count in ``ks``.

    Columns are ordered by descending weight. A driver accepts iff
    ``u < p``; accepted drivers arrive in the order of ``u / p``.
    """
    m, s = u.shape
    keys = np.empty(s, np.float32)
    cols = np.empty(s, np.int64)
    best = np.empty(s, np.int64)
    for r in range(m):
        n = 0
        for i in range(s):
            x = u[r, i]
            if x < p[i]:
                key = x / p[i]
                j = n
                while j > 0 and keys[j - 1] > key:
                    keys[j] = keys[j - 1]
                    cols[j] = cols[j - 1]
                    j -= 1
                keys[j] = key
                cols[j] = i
                n += 1
        if n == 0:
            continue
        b = cols[0]
        best[0] = b
        for j in range(1, n):
            if cols[j] < b:
                b = cols[j]
            best[j] = b
        for t in range(ks.shape[0]):
            mm = ks[t] if ks[t] < n else n
            v = w[best[mm - 1]]
            sums[t] += v
            sqs[t] += v * v
