"""Exact maximum-weight bipartite matching on sparse score maps."""

from __future__ import annotations

from typing import Hashable, Mapping

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = ["max_weight_matching", "matching_value"]

Edge = tuple[Hashable, Hashable]


def max_weight_matching(weights: Mapping[Edge, float]) -> list[Edge]:
    """Maximum-weight (not necessarily perfect) matching.

    ``weights`` maps ``(left, right)`` to a non-negative weight; absent pairs
    cannot be matched. Returns the matched pairs sorted by ``(left, right)``.
    Nodes are indexed in ascending id order before solving, so the output is
    deterministic for a given instance.
    """
    if not weights:
        return []
    lefts = sorted({a for a, _ in weights})
    rights = sorted({b for _, b in weights})
    li = {a: i for i, a in enumerate(lefts)}
    ri = {b: j for j, b in enumerate(rights)}
    mat = np.zeros((len(lefts), len(rights)))
    for (a, b), w in weights.items():
        if w < 0:
            raise ValueError(f"negative weight on edge {(a, b)}")
        mat[li[a], ri[b]] = w
    # zero-filled non-edges cost nothing, so a maximum assignment on the dense
    # matrix is a maximum matching once non-edges are dropped
    rows, cols = linear_sum_assignment(mat, maximize=True)
    out = []
    for i, j in zip(rows, cols):
        edge = (lefts[i], rights[j])
        if edge in weights:
            out.append(edge)
    return sorted(out)


def matching_value(weights: Mapping[Edge, float], matching) -> float:
    return float(sum(weights[e] for e in matching))
