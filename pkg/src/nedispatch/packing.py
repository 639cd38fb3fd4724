"""Per-cycle notification packing.

Every packer has the signature ``packer(snap, params, protocol, rng=None,
config=None)`` and returns a :class:`~nedispatch.core.NotificationPlan`
whose sets list drivers by descending score (ties by ascending id).

* :func:`pack_ed` - exclusive dispatch via maximum-weight matching.
* :func:`pack_opt` - exact welfare maximisation per connected component.
* :func:`pack_greedy`, :func:`pack_rejection_aware`, :func:`pack_ed_plus` -
  the three heuristics.

The heuristics run their pseudocode literally. Under FA (and with
``theta > 0`` under BA) a later addition can push an earlier member's
marginal below ``theta * p_d``; with ``config.repair`` (the default) such
members are then dropped until the plan is feasible.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .core import MarketParams, NotificationPlan, Scenario, ValidationError
from .matching import max_weight_matching
from .valuation import Protocol, batch_value, value

__all__ = [
    "PACKERS",
    "ComponentTooLarge",
    "CycleSnapshot",
    "PackingConfig",
    "components",
    "get_packer",
    "pack_ed",
    "pack_ed_plus",
    "pack_greedy",
    "pack_opt",
    "pack_rejection_aware",
    "plan_value",
    "repair_plan",
    "snapshot_from_scenario",
]

_EPS = 1e-12


class ComponentTooLarge(RuntimeError):
    """A connected component exceeds the exact search's node cap."""

    def __init__(self, n_nodes: int, cap: int):
        super().__init__(f"component too large: {n_nodes} nodes exceeds the cap of {cap}")
        self.n_nodes = n_nodes
        self.cap = cap


@dataclass(frozen=True)
class PackingConfig:
    """Tunables shared by the packers.

    ``prune`` controls the exclusive-driver pruning of :func:`pack_opt`:
    ``"auto"`` applies it only where it provably preserves the optimum
    (BA at ``theta == 0``), ``True`` always, ``False`` never.
    ``fallback`` names a packer used on components over ``node_cap``
    instead of raising.
    """

    rej_threshold: float = 0.8
    min_commit_size: int = 2
    repair: bool = True
    node_cap: int = 24
    prune: bool | str = "auto"
    fallback: str | None = None


DEFAULT_CONFIG = PackingConfig()


@dataclass(frozen=True)
class CycleSnapshot:
    """Waiting riders, idle drivers and what the optimiser sees of them."""

    riders: tuple[int, ...]
    drivers: tuple[int, ...]
    weights: Mapping[tuple[int, int], float]
    probs: Mapping[int, float]

    def __post_init__(self):
        object.__setattr__(self, "riders", tuple(sorted(self.riders)))
        object.__setattr__(self, "drivers", tuple(sorted(self.drivers)))
        rset, dset = set(self.riders), set(self.drivers)
        for d in self.drivers:
            if d not in self.probs:
                raise ValidationError(f"snapshot has no acceptance probability for driver {d}")
            if not 0.0 <= self.probs[d] <= 1.0:
                raise ValidationError(f"driver {d}: probability {self.probs[d]!r} outside [0, 1]")
        for r, d in self.weights:
            if r not in rset or d not in dset:
                raise ValidationError(f"snapshot weight {(r, d)} references an absent id")

    def neighbours(self) -> dict[int, list[int]]:
        """rider -> adjacent drivers by descending weight, ties by id."""
        adj: dict[int, list[int]] = {r: [] for r in self.riders}
        for r, d in self.weights:
            adj[r].append(d)
        for r, ds in adj.items():
            ds.sort(key=lambda d: (-self.weights[(r, d)], d))
        return adj


def snapshot_from_scenario(
    scenario: Scenario,
    rider_ids: Sequence[int] | None = None,
    driver_ids: Sequence[int] | None = None,
    probs: Mapping[int, float] | None = None,
) -> CycleSnapshot:
    """Restrict ``scenario`` to the given ids (all ids when omitted)."""
    riders = tuple(rider_ids) if rider_ids is not None else tuple(r.id for r in scenario.riders)
    drivers = tuple(driver_ids) if driver_ids is not None else tuple(d.id for d in scenario.drivers)
    rset, dset = set(riders), set(drivers)
    weights = {k: w for k, w in scenario.weights.items() if k[0] in rset and k[1] in dset}
    if probs is None:
        probs = scenario.accept_probs
    return CycleSnapshot(riders, drivers, weights, {d: probs[d] for d in drivers})


def _ordered(snap: CycleSnapshot, r: int, ds) -> tuple[int, ...]:
    return tuple(sorted(ds, key=lambda d: (-snap.weights[(r, d)], d)))


def _offers(snap: CycleSnapshot, r: int, ds) -> list[tuple[float, float]]:
    return [(snap.weights[(r, d)], snap.probs[d]) for d in ds]


def _plan(snap: CycleSnapshot, sets: Mapping[int, Sequence[int]]) -> NotificationPlan:
    return NotificationPlan({r: _ordered(snap, r, ds) for r, ds in sets.items() if ds})


def plan_value(plan: NotificationPlan, snap: CycleSnapshot, protocol) -> float:
    """Total expected welfare of ``plan`` on ``snap``."""
    protocol = Protocol.parse(protocol)
    return float(sum(value(protocol, _offers(snap, r, ds)) for r, ds in plan.sets.items()))


def repair_plan(plan: NotificationPlan, snap: CycleSnapshot, params: MarketParams, protocol) -> NotificationPlan:
    """Drop members whose marginal falls short of ``theta * p_d``.

    Per ride, the member with the largest shortfall (ties: lowest id) is
    removed and the check repeated until every remaining member clears the
    threshold.
    """
    protocol = Protocol.parse(protocol)
    out = {}
    for r, ds in plan.sets.items():
        ds = list(ds)
        while ds:
            offers = _offers(snap, r, ds)
            full = value(protocol, offers)
            worst, worst_slack = None, -_EPS
            for i, d in enumerate(ds):
                gain = full - value(protocol, offers[:i] + offers[i + 1 :])
                slack = gain - params.theta * snap.probs[d]
                if slack < worst_slack or (slack == worst_slack and worst is not None and d < ds[worst]):
                    worst, worst_slack = i, slack
            if worst is None:
                break
            del ds[worst]
        if ds:
            out[r] = ds
    return _plan(snap, out)


def _finish(plan: NotificationPlan, snap, params, protocol, config: PackingConfig) -> NotificationPlan:
    return repair_plan(plan, snap, params, protocol) if config.repair else plan


# --- exclusive dispatch ------------------------------------------------------


def pack_ed(snap: CycleSnapshot, params: MarketParams | None = None, protocol=None, rng=None, config=None) -> NotificationPlan:
    """One driver per ride: a maximum-weight matching on the raw scores."""
    config = config or DEFAULT_CONFIG
    plan = _plan(snap, {r: [d] for r, d in max_weight_matching(snap.weights)})
    if params is None or protocol is None:
        return plan
    return _finish(plan, snap, params, protocol, config)


# --- heuristics --------------------------------------------------------------


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def pack_greedy(snap: CycleSnapshot, params: MarketParams, protocol, rng=None, config=None) -> NotificationPlan:
    """Drivers in random order, each to the ride with the largest marginal gain."""
    config = config or DEFAULT_CONFIG
    protocol = Protocol.parse(protocol)
    rng = _rng(rng)
    rides_of: dict[int, list[int]] = {d: [] for d in snap.drivers}
    for r, d in sorted(snap.weights):
        rides_of[d].append(r)
    sets: dict[int, list[int]] = {r: [] for r in snap.riders}
    current = {r: 0.0 for r in snap.riders}
    order = [snap.drivers[i] for i in rng.permutation(len(snap.drivers))]
    for d in order:
        p = snap.probs[d]
        best_r, best_gain, best_val = None, None, None
        for r in rides_of[d]:
            if len(sets[r]) >= params.cap_u:
                continue
            new_val = value(protocol, _offers(snap, r, sets[r] + [d]))
            gain = new_val - current[r]
            if best_gain is None or gain > best_gain:
                best_r, best_gain, best_val = r, gain, new_val
        if best_r is not None and best_gain > params.theta * p:
            sets[best_r].append(d)
            current[best_r] = best_val
    return _finish(_plan(snap, sets), snap, params, protocol, config)


def pack_rejection_aware(snap: CycleSnapshot, params: MarketParams, protocol, rng=None, config=None) -> NotificationPlan:
    """Batch low-acceptance drivers behind each ride, then match the rest."""
    config = config or DEFAULT_CONFIG
    rng = _rng(rng)
    adj = snap.neighbours()
    free = set(snap.drivers)
    open_rides = set(snap.riders)
    sets: dict[int, list[int]] = {}
    for r in [snap.riders[i] for i in rng.permutation(len(snap.riders))]:
        batch: list[int] = []
        for d in adj[r]:
            if d not in free:
                continue
            batch.append(d)
            if 1.0 - snap.probs[d] < config.rej_threshold or len(batch) >= params.cap_u:
                break
        if len(batch) >= config.min_commit_size:
            sets[r] = batch
            free.difference_update(batch)
            open_rides.discard(r)
    rest = {(r, d): w for (r, d), w in snap.weights.items() if r in open_rides and d in free}
    for r, d in max_weight_matching(rest):
        sets[r] = [d]
    return _finish(_plan(snap, sets), snap, params, protocol, config)


def pack_ed_plus(snap: CycleSnapshot, params: MarketParams, protocol, rng=None, config=None) -> NotificationPlan:
    """Exclusive matching, then at most one extra driver per matched ride."""
    config = config or DEFAULT_CONFIG
    protocol = Protocol.parse(protocol)
    rng = _rng(rng)
    matched = max_weight_matching(snap.weights)
    sets = {r: [d] for r, d in matched}
    free = set(snap.drivers) - {d for _, d in matched}
    adj = snap.neighbours()
    rides = [r for r, _ in matched]
    if params.cap_u >= 2:
        for r in [rides[i] for i in rng.permutation(len(rides))]:
            extra = next((d for d in adj[r] if d in free), None)
            if extra is None:
                continue
            single = value(protocol, _offers(snap, r, sets[r]))
            pair = value(protocol, _offers(snap, r, sets[r] + [extra]))
            if pair >= single + params.theta * snap.probs[extra]:
                sets[r].append(extra)
                free.discard(extra)
    return _finish(_plan(snap, sets), snap, params, protocol, config)


# --- exact packing -----------------------------------------------------------


def components(snap: CycleSnapshot) -> list[tuple[list[int], list[int]]]:
    """Connected components as ``(rider ids, driver ids)``, both ascending.

    Isolated nodes are omitted. Components are ordered by their smallest
    rider id.
    """
    if not snap.weights:
        return []
    ri = {r: i for i, r in enumerate(snap.riders)}
    di = {d: j for j, d in enumerate(snap.drivers)}
    nr = len(snap.riders)
    n = nr + len(snap.drivers)
    edges = np.array([(ri[r], nr + di[d]) for r, d in snap.weights], dtype=np.int64)
    graph = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    touched = np.zeros(n, dtype=bool)
    touched[edges.ravel()] = True
    groups: dict[int, tuple[list[int], list[int]]] = {}
    for i, r in enumerate(snap.riders):
        if touched[i]:
            groups.setdefault(labels[i], ([], []))[0].append(r)
    for j, d in enumerate(snap.drivers):
        if touched[nr + j]:
            groups.setdefault(labels[nr + j], ([], []))[1].append(d)
    return sorted(groups.values(), key=lambda g: g[0][0])


def _prune_applies(protocol: Protocol, params: MarketParams, config: PackingConfig) -> bool:
    if config.prune == "auto":
        return protocol.kind == "BA" and params.theta == 0
    return bool(config.prune)


def _prune_exclusive(snap: CycleSnapshot, riders, drivers, params) -> list[int]:
    """Keep, for each rider, the top-U exclusive drivers per probability class."""
    degree = dict.fromkeys(drivers, 0)
    owner = {}
    for r, d in snap.weights:
        if d in degree:
            degree[d] += 1
            owner[d] = r
    dropped = set()
    by_class: dict[tuple[int, float], list[int]] = {}
    for d in drivers:
        if degree[d] == 1:
            by_class.setdefault((owner[d], snap.probs[d]), []).append(d)
    for (r, _), ds in by_class.items():
        ds.sort(key=lambda d: (-snap.weights[(r, d)], d))
        dropped.update(ds[params.cap_u :])
    return [d for d in drivers if d not in dropped]


def _candidates(snap, r, nbrs, bit, params, protocol):
    """Feasible non-empty notification sets of rider ``r``.

    Returns ``(value, mask, drivers)`` triples, ``drivers`` ascending. A set
    beaten by one of its own subsets has a negative marginal and so is
    already excluded by the threshold filter.
    """
    values: dict[tuple[int, ...], float] = {(): 0.0}
    out = []
    w_all = np.array([snap.weights[(r, d)] for d in nbrs])
    p_all = np.array([snap.probs[d] for d in nbrs])
    for size in range(1, min(params.cap_u, len(nbrs)) + 1):
        combos = list(itertools.combinations(range(len(nbrs)), size))
        idx = np.array(combos, dtype=np.int64)
        vals = batch_value(protocol, w_all[idx], p_all[idx]).tolist()
        for combo, v in zip(combos, vals):
            values[combo] = v
        for combo, v in zip(combos, vals):
            if v <= 0.0:
                continue
            if any(
                v - values[combo[:pos] + combo[pos + 1 :]] < params.theta * p_all[combo[pos]] - _EPS
                for pos in range(size)
            ):
                continue
            ids = tuple(sorted(nbrs[i] for i in combo))
            mask = 0
            for d in ids:
                mask |= bit[d]
            out.append((v, mask, ids))
    out.sort(key=lambda c: (-c[0], c[2]))
    return out


_DP_CELLS = 1 << 22


def _solve_component(snap, riders, drivers, params, protocol):
    """Exact optimum of one component, riders ascending.

    Among assignments within 1e-12 of the optimum the lexicographically
    smallest tuple of per-rider driver sets is kept. Components with few
    drivers use a dynamic program over used-driver bitmasks, the rest
    branch and bound.
    """
    bit = {d: 1 << i for i, d in enumerate(drivers)}
    adj = {r: [] for r in riders}
    dset = set(drivers)
    for r, d in snap.weights:
        if r in adj and d in dset:
            adj[r].append(d)
    cands = [_candidates(snap, r, sorted(adj[r]), bit, params, protocol) for r in riders]
    widest = max((len(c) for c in cands), default=0)
    if (1 << len(drivers)) * max(widest, 1) <= _DP_CELLS:
        chosen = _mask_program(cands, len(drivers))
    else:
        chosen = _branch_and_bound(cands)
    return {r: list(ids) for r, ids in zip(riders, chosen) if ids}


def _mask_program(cands, n_drivers):
    """Bottom-up DP: best[i][used] is the optimum of riders i.. given used drivers."""
    n = len(cands)
    masks = np.arange(1 << n_drivers, dtype=np.int64)
    best = [None] * (n + 1)
    best[n] = np.zeros(len(masks))
    for i in range(n - 1, -1, -1):
        cur = best[i + 1].copy()
        if cands[i]:
            vals = np.array([c[0] for c in cands[i]])
            cmask = np.array([c[1] for c in cands[i]], dtype=np.int64)
            free = (masks[:, None] & cmask[None, :]) == 0
            total = np.where(free, vals[None, :] + best[i + 1][masks[:, None] | cmask[None, :]], -np.inf)
            np.maximum(cur, total.max(axis=1), out=cur)
        best[i] = cur
    chosen = []
    used = 0
    for i in range(n):
        target = best[i][used] - _EPS
        pick = ()
        if best[i + 1][used] < target:
            for v, mask, ids in sorted(cands[i], key=lambda c: c[2]):
                if not mask & used and v + best[i + 1][used | mask] >= target:
                    pick = ids
                    used |= mask
                    break
        chosen.append(pick)
    return chosen


def _branch_and_bound(cands):
    n = len(cands)
    best_val = -1.0
    best_key = None
    chosen: list[tuple[int, ...]] = [()] * n

    def bound(i, used):
        total = 0.0
        for j in range(i, n):
            for v, mask, _ in cands[j]:
                if not mask & used:
                    total += v
                    break
        return total

    def search(i, used, acc):
        nonlocal best_val, best_key
        if i == n:
            key = tuple(chosen)
            if acc > best_val + _EPS or (acc >= best_val - _EPS and key < best_key):
                best_val, best_key = acc, key
            return
        if acc + bound(i, used) < best_val - _EPS:
            return
        for v, mask, ids in cands[i]:
            if mask & used:
                continue
            chosen[i] = ids
            search(i + 1, used | mask, acc + v)
        chosen[i] = ()
        search(i + 1, used, acc)

    search(0, 0, 0.0)
    return list(best_key)


def pack_opt(snap: CycleSnapshot, params: MarketParams, protocol, rng=None, config=None) -> NotificationPlan:
    """Exact maximiser of total expected welfare under the packing constraints.

    Each connected component is solved independently. Components with more
    than ``config.node_cap`` nodes (after pruning) raise
    :class:`ComponentTooLarge` unless ``config.fallback`` names a packer.
    """
    config = config or DEFAULT_CONFIG
    protocol = Protocol.parse(protocol)
    prune = _prune_applies(protocol, params, config)
    sets: dict[int, list[int]] = {}
    for riders, drivers in components(snap):
        if prune:
            drivers = _prune_exclusive(snap, riders, drivers, params)
        size = len(riders) + len(drivers)
        if size > config.node_cap:
            if config.fallback is None:
                raise ComponentTooLarge(size, config.node_cap)
            rset, dset = set(riders), set(drivers)
            sub = CycleSnapshot(
                riders,
                drivers,
                {k: w for k, w in snap.weights.items() if k[0] in rset and k[1] in dset},
                {d: snap.probs[d] for d in drivers},
            )
            sets.update(get_packer(config.fallback)(sub, params, protocol, rng, config).sets)
            continue
        sets.update(_solve_component(snap, riders, drivers, params, protocol))
    return _plan(snap, sets)


PACKERS: dict[str, Callable[..., NotificationPlan]] = {
    "ed": pack_ed,
    "opt": pack_opt,
    "greedy": pack_greedy,
    "rejection_aware": pack_rejection_aware,
    "ed_plus": pack_ed_plus,
}


def get_packer(name: str) -> Callable[..., NotificationPlan]:
    try:
        return PACKERS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown packer {name!r}; choose from {sorted(PACKERS)}") from None
