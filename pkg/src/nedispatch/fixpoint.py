"""Fixed-point coupling of the fluid model with simulated dispatch snapshots.

Each iteration maps a belief ``q`` to market sizes ``(R0, D0)`` through the
closed-form equilibrium, samples snapshots of that size, runs the packer
once per snapshot and records the realised notification-set sizes ``q'``.
Snapshot sample ``i`` always uses the same random streams, so ``q'`` changes
with ``(R0, D0)`` only through the sampled pool sizes; without these common
random numbers Monte-Carlo noise alone would keep the gap above any small
tolerance.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import MarketParams, NotificationProfile, ValidationError
from .fluid import DegenerateModel, SupplyInfeasible, equilibrium
from .packing import DEFAULT_CONFIG, CycleSnapshot, PackingConfig, get_packer
from .valuation import Protocol

__all__ = [
    "FixpointConfig",
    "FixpointError",
    "FixpointTrace",
    "IterationRecord",
    "find_equilibrium",
    "frozen_graph_score",
    "probabilistic_round",
    "self_consistency",
    "snapshot_q",
]


class FixpointError(RuntimeError):
    """The fluid equilibrium failed at some iteration."""

    def __init__(self, iteration: int, exc: Exception):
        super().__init__(f"iteration {iteration}: {exc}")
        self.iteration = iteration
        self.original = exc


@dataclass(frozen=True)
class FixpointConfig:
    n_snapshot_samples: int = 1000
    damping: float = 0.5
    tol: float = 1e-3
    max_iter: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValidationError(f"damping must lie in (0, 1], got {self.damping!r}")
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.max_iter < 1 or self.n_snapshot_samples < 1:
            raise ValidationError("max_iter and n_snapshot_samples must be at least 1")


@dataclass(frozen=True)
class IterationRecord:
    q: tuple[float, ...]
    r0: float
    d0: float
    q_next: tuple[float, ...]
    gap: float


@dataclass
class FixpointTrace:
    iterations: list[IterationRecord]
    converged: bool
    final: tuple[tuple[float, ...], float, float]

    @property
    def n_updates(self) -> int:
        """Damped updates performed before the reported point."""
        return len(self.iterations) - 1 if self.converged else len(self.iterations)

    def to_dict(self) -> dict:
        q, r0, d0 = self.final
        return {
            "converged": self.converged,
            "final": {"q": list(q), "r0": r0, "d0": d0},
            "iterations": [
                {"q": list(it.q), "r0": it.r0, "d0": it.d0, "q_next": list(it.q_next), "gap": it.gap}
                for it in self.iterations
            ],
        }

    def to_json(self, path, extra: dict | None = None) -> None:
        doc = self.to_dict()
        if extra:
            doc.update(extra)
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def write_csv(self, path) -> None:
        u = len(self.final[0]) - 1
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter"] + [f"q{i}" for i in range(u + 1)] + ["R0", "D0", "gap"])
            for t, it in enumerate(self.iterations):
                w.writerow([t] + [repr(x) for x in it.q] + [repr(it.r0), repr(it.d0), repr(it.gap)])


def probabilistic_round(x: float, rng: np.random.Generator) -> int:
    """``ceil(x)`` with probability ``x - floor(x)``, else ``floor(x)``."""
    if x < 0 or not math.isfinite(x):
        raise ValidationError(f"cannot round {x!r}: needs a finite non-negative value")
    lo = math.floor(x)
    frac = x - lo
    if frac == 0.0:
        return int(lo)
    return int(lo) + int(rng.random() < frac)


def _sample_streams(seed: int, n: int):
    return np.random.SeedSequence(seed).spawn(n)


def _snapshot(r0, d0, p, child):
    """One stylised snapshot: Gaussian positions, complete bipartite graph."""
    s_round, s_riders, s_drivers, s_pack, s_resp = child.spawn(5)
    rng = np.random.default_rng(s_round)
    nr = probabilistic_round(r0, rng)
    nd = probabilistic_round(d0, rng)
    rpos = np.random.default_rng(s_riders).normal(size=(nr, 2))
    dpos = np.random.default_rng(s_drivers).normal(size=(nd, 2))
    weights = {}
    if nr and nd:
        dist = np.hypot(rpos[:, None, 0] - dpos[None, :, 0], rpos[:, None, 1] - dpos[None, :, 1])
        w = 1.0 / (1.0 + dist)
        weights = {(i, j): float(w[i, j]) for i in range(nr) for j in range(nd)}
    snap = CycleSnapshot(tuple(range(nr)), tuple(range(nd)), weights, {j: p for j in range(nd)})
    return snap, np.random.default_rng(s_pack), np.random.default_rng(s_resp)


def _resolve_packer(packer):
    return get_packer(packer) if isinstance(packer, str) else packer


def snapshot_q(
    r0: float,
    d0: float,
    packer,
    protocol,
    params: MarketParams,
    n_samples: int,
    seed: int,
    config: PackingConfig | None = None,
) -> NotificationProfile:
    """Pooled notification-set sizes over ``n_samples`` stylised snapshots.

    A sample holds ``probabilistic_round(r0)`` riders and
    ``probabilistic_round(d0)`` drivers at standard-normal positions, all
    with acceptance probability ``params.p``; the packer runs once.
    """
    return NotificationProfile.from_counts(_snapshot_counts(r0, d0, packer, protocol, params, n_samples, seed, config))


def _snapshot_counts(r0, d0, packer, protocol, params, n_samples, seed, config=None) -> np.ndarray:
    if r0 < 0 or d0 < 0:
        raise ValidationError(f"market sizes must be non-negative, got R0={r0!r}, D0={d0!r}")
    packer = _resolve_packer(packer)
    protocol = Protocol.parse(protocol)
    config = config or DEFAULT_CONFIG
    counts = np.zeros(params.cap_u + 1)
    for child in _sample_streams(seed, n_samples):
        snap, rng, _ = _snapshot(r0, d0, params.p, child)
        if not snap.riders:
            continue
        if not snap.drivers:
            counts[0] += len(snap.riders)
            continue
        plan = packer(snap, params, protocol, rng, config)
        for r in snap.riders:
            counts[plan.size_of(r)] += 1
    return counts


SnapshotFn = Callable[[float, float, int], NotificationProfile]


def find_equilibrium(
    protocol,
    params: MarketParams,
    packer,
    cfg: FixpointConfig,
    q_init,
    *,
    packing: PackingConfig | None = None,
    snapshot_fn: SnapshotFn | None = None,
) -> FixpointTrace:
    """Damped iteration ``q <- (1 - damping) q + damping q'``.

    Stops as soon as ``max|q' - q| <= tol`` (that ``q`` is reported) or
    after ``max_iter`` evaluations. ``snapshot_fn(r0, d0, seed)`` replaces
    the simulated snapshot step when given.
    """
    protocol = Protocol.parse(protocol)
    q = np.asarray(q_init.q if isinstance(q_init, NotificationProfile) else q_init, dtype=float)
    NotificationProfile(tuple(q))  # validates the simplex
    if len(q) != params.cap_u + 1:
        raise ValidationError(f"q_init has {len(q)} entries but U = {params.cap_u}")
    records = []
    for t in range(cfg.max_iter):
        try:
            state = equilibrium(protocol, params, tuple(q))
        except (SupplyInfeasible, DegenerateModel) as exc:
            raise FixpointError(t, exc) from exc
        if snapshot_fn is not None:
            q_next = np.asarray(snapshot_fn(state.r0, state.d0, cfg.seed).q, dtype=float)
        else:
            q_next = snapshot_q(state.r0, state.d0, packer, protocol, params, cfg.n_snapshot_samples, cfg.seed, packing).as_array()
        gap = float(np.max(np.abs(q_next - q)))
        records.append(IterationRecord(tuple(map(float, q)), state.r0, state.d0, tuple(map(float, q_next)), gap))
        if gap <= cfg.tol:
            return FixpointTrace(records, True, (tuple(map(float, q)), state.r0, state.d0))
        q = (1.0 - cfg.damping) * q + cfg.damping * q_next
        q = np.clip(q, 0.0, None)
        q /= q.sum()
    last = records[-1]
    return FixpointTrace(records, False, (last.q, last.r0, last.d0))


def self_consistency(
    trace: FixpointTrace,
    protocol,
    params: MarketParams,
    packer,
    cfg: FixpointConfig,
    packing: PackingConfig | None = None,
    factor: int = 4,
    seed_offset: int = 1,
) -> tuple[float, float]:
    """Re-sample ``q'`` at the reported point with ``factor`` times the
    samples and fresh streams.

    Returns ``(distance, bound)`` where ``bound = tol + 4 * sqrt(0.25 *
    (1/M1 + 1/M2))`` and ``M1``, ``M2`` are the rider-epoch counts behind
    the original and the refined profile.
    """
    q_star, r0, d0 = trace.final
    base = _snapshot_counts(r0, d0, packer, protocol, params, cfg.n_snapshot_samples, cfg.seed, packing)
    fine = _snapshot_counts(r0, d0, packer, protocol, params, factor * cfg.n_snapshot_samples, cfg.seed + seed_offset, packing)
    m1, m2 = base.sum(), fine.sum()
    if m2 == 0 or m1 == 0:
        return 0.0, cfg.tol
    q_fine = fine / m2
    dist = float(np.max(np.abs(q_fine - np.asarray(q_star))))
    return dist, cfg.tol + 4.0 * math.sqrt(0.25 * (1.0 / m1 + 1.0 / m2))


@dataclass(frozen=True)
class FrozenScore:
    avg_score: float
    match_rate: float
    n_matches: int
    n_riders: int
    rounds: float

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in self.__dict__.items()}


def frozen_graph_score(
    r0: float,
    d0: float,
    packer,
    protocol,
    params: MarketParams,
    n_samples: int,
    seed: int,
    config: PackingConfig | None = None,
) -> FrozenScore:
    """Evaluate a packer on frozen stylised snapshots until no edge is left.

    Each round packs the remaining riders and drivers, draws acceptances
    (probability ``params.p``) and exponential response times (rate ``mu``),
    and resolves every set by the protocol. Rejected pairs are removed from
    the graph, losing drivers return to the pool and each unmatched rider
    reneges with probability ``min(1, eta / mu)`` per round (one expected
    response time).
    """
    packer = _resolve_packer(packer)
    protocol = Protocol.parse(protocol)
    config = config or DEFAULT_CONFIG
    renege = min(1.0, params.eta / params.mu) if params.mu > 0 else 1.0
    scores = []
    n_riders = 0
    rounds = 0
    for child in _sample_streams(seed, n_samples):
        snap, rng, resp = _snapshot(r0, d0, params.p, child)
        n_riders += len(snap.riders)
        weights = dict(snap.weights)
        riders = set(snap.riders)
        drivers = set(snap.drivers)
        while riders and drivers:
            live = {k: w for k, w in weights.items() if k[0] in riders and k[1] in drivers}
            if not live:
                break
            sub = CycleSnapshot(tuple(riders), tuple(drivers), live, {d: params.p for d in drivers})
            plan = packer(sub, params, protocol, rng, config)
            if len(plan) == 0:
                break
            rounds += 1
            for r in sorted(plan.sets):
                ds = plan.sets[r]
                accept = resp.random(len(ds)) < params.p
                times = resp.exponential(1.0, size=len(ds))
                winner = _resolve(protocol, [live[(r, d)] for d in ds], accept, times)
                for d, ok in zip(ds, accept):
                    if not ok:
                        weights.pop((r, d), None)
                if winner is not None:
                    d = ds[winner]
                    scores.append(live[(r, d)])
                    riders.discard(r)
                    drivers.discard(d)
            for r in sorted(riders):
                if resp.random() < renege:
                    riders.discard(r)
    n = len(scores)
    return FrozenScore(
        avg_score=float(np.mean(scores)) if scores else math.nan,
        match_rate=n / n_riders if n_riders else math.nan,
        n_matches=n,
        n_riders=n_riders,
        rounds=rounds / n_samples,
    )


def _resolve(protocol: Protocol, w, accept, times):
    idx = [i for i in range(len(w)) if accept[i]]
    if not idx:
        return None
    idx.sort(key=lambda i: times[i])
    k = protocol.effective_k(len(w))
    first = idx[:k]
    return min(first, key=lambda i: (-w[i], i))
