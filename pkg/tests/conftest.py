import itertools
import math

import numpy as np
import pytest


def random_offers(rng, size, tie_weights=False):
    if tie_weights:
        w = rng.choice([0.25, 0.5, 1.0], size=size)
    else:
        w = rng.random(size)
    p = rng.random(size)
    return [(float(a), float(b)) for a, b in zip(w, p)]


def permutation_oracle(offers, k):
    """Expected best-of-first-k over accept subsets and every arrival order.

    Uses permutations of the accepting drivers rather than the subset
    counting of the library, so the two derivations are independent.
    """
    total = 0.0
    n = len(offers)
    for mask in range(1 << n):
        accepted = [i for i in range(n) if mask >> i & 1]
        prob = 1.0
        for i in range(n):
            prob *= offers[i][1] if mask >> i & 1 else 1.0 - offers[i][1]
        if not accepted or prob == 0.0:
            continue
        orders = list(itertools.permutations(accepted))
        best = sum(max(offers[i][0] for i in order[:k]) for order in orders) / len(orders)
        total += prob * best
    return total


def brute_force_packing(weights, probs, riders, drivers, cap_u, theta, value_fn):
    """Enumerate every assignment of drivers to riders (or nobody).

    Returns the best total over feasible assignments, where feasible means
    every set has size at most ``cap_u`` and every member has marginal
    value at least ``theta * p``.
    """
    best = 0.0
    options = [None] + list(riders)
    for assign in itertools.product(options, repeat=len(drivers)):
        sets = {r: [] for r in riders}
        ok = True
        for d, r in zip(drivers, assign):
            if r is None:
                continue
            if (r, d) not in weights:
                ok = False
                break
            sets[r].append(d)
        if not ok or any(len(s) > cap_u for s in sets.values()):
            continue
        total = 0.0
        for r, ds in sets.items():
            offers = [(weights[(r, d)], probs[d]) for d in ds]
            v = value_fn(offers)
            for i, d in enumerate(ds):
                rest = offers[:i] + offers[i + 1 :]
                if v - value_fn(rest) < theta * probs[d] - 1e-12:
                    ok = False
            total += v
        if ok and total > best:
            best = total
    return best


@pytest.fixture
def rng():
    return np.random.default_rng(20260101)


def close(a, b, tol=1e-12):
    return math.isclose(a, b, rel_tol=0.0, abs_tol=tol)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
