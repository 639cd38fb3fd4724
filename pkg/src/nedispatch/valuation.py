"""Expected-welfare set functions for the contention-resolution protocols.

An offer set is a sequence of ``(weight, accept_prob)`` pairs, one per
notified driver. Three families of evaluators live here:

* scalar closed forms (:func:`fa_value`, :func:`ba_value`,
  :func:`k_accept_value`) used by the heuristics,
* :func:`batch_value`, a vectorised version used by the exact packer,
* literal ``2^|S|`` enumerations (``*_enum``) and a Monte-Carlo estimator
  that serve as independent oracles.

k-Accept finalises at the k-th *acceptance* (or once every notified driver
has answered) and picks the best of the acceptances collected so far.
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "BA",
    "ENUM_CAP",
    "FA",
    "Protocol",
    "KAccept",
    "ba_value",
    "ba_value_enum",
    "ba_value_sorted",
    "batch_value",
    "fa_value",
    "fa_value_enum",
    "k_accept_value",
    "k_accept_value_enum",
    "marginal_gain",
    "mc_value_oracle",
    "mc_values",
    "value",
    "value_enum",
]

#: Largest offer set the enumeration oracles accept.
ENUM_CAP = 20

Offer = tuple[float, float]


@dataclass(frozen=True)
class Protocol:
    """Contention-resolution rule: ``FA``, ``BA`` or ``KACCEPT`` with ``k``."""

    kind: str
    k: int | None = None

    def __post_init__(self):
        kind = self.kind.upper()
        object.__setattr__(self, "kind", kind)
        if kind in ("FA", "BA"):
            if self.k is not None:
                raise ValueError(f"{kind} takes no k")
        elif kind == "KACCEPT":
            if self.k is None or int(self.k) != self.k or self.k < 1:
                raise ValueError(f"k-Accept needs an integer k >= 1, got {self.k!r}")
            object.__setattr__(self, "k", int(self.k))
        else:
            raise ValueError(f"unknown protocol kind {self.kind!r}")

    @classmethod
    def parse(cls, text: "str | Protocol") -> "Protocol":
        """Read ``"FA"``, ``"BA"``, ``"k3"`` or ``"KAccept(3)"``."""
        if isinstance(text, Protocol):
            return text
        t = str(text).strip()
        if t.upper() in ("FA", "BA"):
            return cls(t.upper())
        m = re.fullmatch(r"(?i)k(?:accept)?\(?(\d+)\)?", t)
        if m:
            return cls("KACCEPT", int(m.group(1)))
        raise ValueError(f"cannot parse protocol {text!r}")

    def effective_k(self, n: int) -> int:
        """Number of acceptances that trigger finalisation on an n-set."""
        if self.kind == "FA":
            return 1
        if self.kind == "BA":
            return max(n, 1)
        return self.k

    def __str__(self) -> str:
        return self.kind if self.k is None else f"k{self.k}"


FA = Protocol("FA")
BA = Protocol("BA")


def KAccept(k: int) -> Protocol:
    return Protocol("KACCEPT", k)


def _check(offers) -> list[Offer]:
    out = []
    for w, p in offers:
        w, p = float(w), float(p)
        if not (math.isfinite(w) and w >= 0):
            raise ValueError(f"weights must be finite and non-negative, got {w!r}")
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"acceptance probabilities must lie in [0, 1], got {p!r}")
        out.append((w, p))
    return out


def _by_weight(offers: Sequence[Offer]) -> list[Offer]:
    # stable: equal weights keep their input order
    return sorted(offers, key=lambda o: -o[0])


def _poisson_binomial(probs: Iterable[float]) -> list[float]:
    dist = [1.0]
    for p in probs:
        nxt = [0.0] * (len(dist) + 1)
        q = 1.0 - p
        for j, v in enumerate(dist):
            nxt[j] += v * q
            nxt[j + 1] += v * p
        dist = nxt
    return dist


@lru_cache(maxsize=None)
def _kaccept_coef(k: int, n: int) -> np.ndarray:
    """coef[a, b]: chance that a driver with ``a`` better and ``b`` worse
    co-acceptors is the winner, given it accepted."""
    coef = np.zeros((n, n))
    for a in range(n):
        for b in range(n - a):
            t = a + b + 1
            m = min(k, t)
            coef[a, b] = math.comb(b, m - 1) / math.comb(t, m)
    return coef


def fa_value(offers) -> float:
    """Expected score when the first accepting driver wins.

    Each accepting driver is equally likely to answer first, so driver ``i``
    contributes ``p_i * w_i * E[1 / (1 + K_i)]`` where ``K_i`` counts the
    other acceptances.
    """
    offers = _check(offers)
    total = 0.0
    for i, (w, p) in enumerate(offers):
        if p == 0.0 or w == 0.0:
            continue
        dist = _poisson_binomial(q for j, (_, q) in enumerate(offers) if j != i)
        total += p * w * sum(v / (c + 1) for c, v in enumerate(dist))
    return total


def ba_value(offers) -> float:
    """Expected score when the best accepting driver wins."""
    return ba_value_sorted(offers)


def ba_value_sorted(offers) -> float:
    """Sorted scan ``sum_i p_i w_i prod_{j<i} (1 - p_j)`` by descending weight."""
    total = 0.0
    none_better = 1.0
    for w, p in _by_weight(_check(offers)):
        total += none_better * p * w
        none_better *= 1.0 - p
    return total


def k_accept_value(offers, k: int) -> float:
    """Expected score under k-Accept.

    The winner is the best of the first ``min(k, |T|)`` acceptances, where
    ``T`` is the random set of accepting drivers and arrivals are in uniformly
    random order. ``k = 1`` gives FA and ``k >= |S|`` gives BA.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    ranked = _by_weight(_check(offers))
    n = len(ranked)
    if n == 0:
        return 0.0
    coef = _kaccept_coef(min(k, n), n)
    probs = [p for _, p in ranked]
    total = 0.0
    for i, (w, p) in enumerate(ranked):
        if p == 0.0 or w == 0.0:
            continue
        better = _poisson_binomial(probs[:i])
        worse = _poisson_binomial(probs[i + 1:])
        s = 0.0
        for a, pa in enumerate(better):
            if pa == 0.0:
                continue
            row = coef[a]
            s += pa * sum(pb * row[b] for b, pb in enumerate(worse))
        total += p * w * s
    return float(total)


def value(protocol: Protocol | str, offers) -> float:
    """Dispatch to the evaluator of ``protocol``."""
    protocol = Protocol.parse(protocol)
    if protocol.kind == "FA":
        return fa_value(offers)
    if protocol.kind == "BA":
        return ba_value(offers)
    return k_accept_value(offers, protocol.k)


def marginal_gain(protocol: Protocol | str, offers, candidate: Offer) -> float:
    """``value(S + d) - value(S)``."""
    offers = list(offers)
    return value(protocol, offers + [candidate]) - value(protocol, offers)


def batch_value(protocol: Protocol | str, w: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Values of many equal-size offer sets at once.

    ``w`` and ``p`` have shape ``(n_sets, set_size)``; row ``i`` is one
    offer set.
    """
    protocol = Protocol.parse(protocol)
    w = np.asarray(w, dtype=float)
    p = np.asarray(p, dtype=float)
    n, s = w.shape
    if s == 0:
        return np.zeros(n)
    order = np.argsort(-w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    p = np.take_along_axis(p, order, axis=1)
    q = 1.0 - p
    k = protocol.effective_k(s)
    if k >= s:
        none_better = np.cumprod(np.concatenate([np.ones((n, 1)), q[:, :-1]], axis=1), axis=1)
        return (none_better * p * w).sum(axis=1)

    coef = _kaccept_coef(k, s)
    # suffix[i]: distribution of acceptances among columns i.. (shape n, s-i+1)
    suffix = [None] * (s + 1)
    suffix[s] = np.ones((n, 1))
    for i in range(s - 1, -1, -1):
        nxt = suffix[i + 1]
        cur = np.zeros((n, nxt.shape[1] + 1))
        cur[:, :-1] += nxt * q[:, i : i + 1]
        cur[:, 1:] += nxt * p[:, i : i + 1]
        suffix[i] = cur
    total = np.zeros(n)
    prefix = np.ones((n, 1))
    for i in range(s):
        worse = suffix[i + 1]
        mix = prefix @ coef[: prefix.shape[1], : worse.shape[1]]
        total += p[:, i] * w[:, i] * (mix * worse).sum(axis=1)
        nxt = np.zeros((n, prefix.shape[1] + 1))
        nxt[:, :-1] += prefix * q[:, i : i + 1]
        nxt[:, 1:] += prefix * p[:, i : i + 1]
        prefix = nxt
    return total


# --- enumeration oracles -------------------------------------------------


def _subsets(offers: Sequence[Offer]):
    n = len(offers)
    if n > ENUM_CAP:
        raise ValueError(f"offer set of size {n} exceeds the enumeration cap {ENUM_CAP}")
    for mask in range(1 << n):
        prob = 1.0
        members = []
        for i, (w, p) in enumerate(offers):
            if mask >> i & 1:
                prob *= p
                members.append(w)
            else:
                prob *= 1.0 - p
        yield prob, members


def fa_value_enum(offers) -> float:
    """FA value by summing over every acceptance set T."""
    return sum(prob * sum(ws) / len(ws) for prob, ws in _subsets(_check(offers)) if ws)


def ba_value_enum(offers) -> float:
    """BA value by summing over every acceptance set T."""
    return sum(prob * max(ws) for prob, ws in _subsets(_check(offers)) if ws)


def k_accept_value_enum(offers, k: int) -> float:
    """k-Accept value: enumerate T, then every equally likely leading m-subset."""
    total = 0.0
    for prob, ws in _subsets(_check(offers)):
        if not ws or prob == 0.0:
            continue
        m = min(k, len(ws))
        leads = [max(c) for c in itertools.combinations(ws, m)]
        total += prob * sum(leads) / len(leads)
    return total


def value_enum(protocol: Protocol | str, offers) -> float:
    protocol = Protocol.parse(protocol)
    if protocol.kind == "FA":
        return fa_value_enum(offers)
    if protocol.kind == "BA":
        return ba_value_enum(offers)
    return k_accept_value_enum(offers, protocol.k)


# --- Monte-Carlo oracle --------------------------------------------------


def mc_values(protocols, offers, n_samples: int, seed: int, chunk: int = 250_000) -> list[tuple[float, float]]:
    """Monte-Carlo (mean, standard error) of the realised score per protocol.

    Every sample draws one uniform ``u_d`` per driver: the driver accepts iff
    ``u_d < p_d`` and, given acceptance, ``u_d / p_d`` is its (uniform,
    independent) response time. All protocols share the same draws.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    protocols = [Protocol.parse(pr) for pr in protocols]
    ranked = _by_weight(_check(offers))
    s = len(ranked)
    if s == 0:
        return [(0.0, 0.0) for _ in protocols]
    from ._mc_kernel import accumulate

    w = np.array([o[0] for o in ranked])
    p = np.array([o[1] for o in ranked], dtype=np.float32)
    ks = np.array([pr.effective_k(s) for pr in protocols], dtype=np.int64)
    rng = np.random.default_rng(seed)
    sums = np.zeros(len(protocols))
    sqs = np.zeros(len(protocols))
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        accumulate(rng.random((m, s), dtype=np.float32), p, w, ks, sums, sqs)
        done += m
    out = []
    for j in range(len(protocols)):
        mean = sums[j] / n_samples
        if n_samples > 1:
            var = max(sqs[j] - n_samples * mean * mean, 0.0) / (n_samples - 1)
            se = math.sqrt(var / n_samples)
        else:
            se = 0.0
        out.append((float(mean), float(se)))
    return out


def mc_value_oracle(protocol: Protocol | str, offers, n_samples: int, seed: int) -> tuple[float, float]:
    """Monte-Carlo estimate ``(mean, std_err)`` of one protocol's value."""
    return mc_values([protocol], offers, n_samples, seed)[0]
