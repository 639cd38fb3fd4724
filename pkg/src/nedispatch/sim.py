"""Cycle-based marketplace simulator and Monte-Carlo harness.

Within a cycle the order of events is fixed:

1. arrivals are injected,
2. abandonment draws (waiting and notified riders renege, idle and notified
   drivers exit),
3. responses due this cycle are processed, then finalisations and
   withdrawals,
4. the packer runs on the waiting riders and idle drivers and the new
   notifications are sent.

Drivers released in a cycle (rejections, withdrawals, lost contention) and
riders whose notifications all failed become available to the packer from
the next cycle on. A match finalised in cycle ``c`` happens at time
``c * cycle_seconds``.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import (
    DEFAULT_TYPE_MIX,
    DriverState,
    MarketParams,
    NotificationProfile,
    RiderState,
    Scenario,
    ValidationError,
    sample_scenario,
)
from .packing import DEFAULT_CONFIG, CycleSnapshot, PackingConfig, get_packer
from .valuation import FA, Protocol

__all__ = [
    "InvariantViolation",
    "MonteCarloResult",
    "PackerFailure",
    "RideRecord",
    "SimConfig",
    "SimResult",
    "SyntheticSource",
    "aggregate",
    "bootstrap_mean_diff",
    "compare_policies",
    "q_profile_of",
    "run_monte_carlo",
    "run_simulation",
]

METRICS = ("avg_score", "avg_match_time_s", "match_count")


class PackerFailure(RuntimeError):
    """A packer raised; carries the cycle index."""

    def __init__(self, cycle: int, exc: Exception):
        super().__init__(f"packer failed at cycle {cycle}: {exc}")
        self.cycle = cycle
        self.original = exc


class InvariantViolation(AssertionError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """Simulator settings; probabilities are per cycle.

    ``homogeneous_p`` replaces every driver's probability inside the
    optimiser only. ``ar_gap`` scales the true acceptance probability of
    drivers notified in sets of two or more to ``(1 - ar_gap) p``;
    ``ar_gap_visible`` also shows the scaled values to the optimiser.
    ``fixed_delay`` forces every response delay (in cycles).
    """

    cycle_seconds: float = 3.0
    response_window_cycles: int = 7
    rider_renege_prob: float = 0.01
    idle_driver_exit_prob: float = 0.001
    notified_driver_exit_prob: float = 0.0
    horizon_cycles: int = 260
    ar_gap: float = 0.0
    ar_gap_visible: bool = False
    homogeneous_p: float | None = None
    protocol: Protocol = FA
    seed: int = 0
    packing: PackingConfig = DEFAULT_CONFIG
    fixed_delay: int | None = None
    check_invariants: bool = False
    record_events: bool = False

    def __post_init__(self):
        object.__setattr__(self, "protocol", Protocol.parse(self.protocol))
        for name in ("rider_renege_prob", "idle_driver_exit_prob", "notified_driver_exit_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v!r}")
        if not 0.0 <= self.ar_gap < 1.0:
            raise ValidationError(f"ar_gap must lie in [0, 1), got {self.ar_gap!r}")
        if self.homogeneous_p is not None and not 0.0 <= self.homogeneous_p <= 1.0:
            raise ValidationError(f"homogeneous_p must lie in [0, 1], got {self.homogeneous_p!r}")
        if self.horizon_cycles < 1:
            raise ValidationError("horizon_cycles must be at least 1")
        if self.response_window_cycles < 1:
            raise ValidationError("response_window_cycles must be at least 1")
        if self.cycle_seconds <= 0:
            raise ValidationError("cycle_seconds must be positive")
        if self.fixed_delay is not None and self.fixed_delay < 1:
            raise ValidationError("fixed_delay must be at least one cycle")

    def replace(self, **changes) -> "SimConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class RideRecord:
    rider_id: int
    outcome: str  # matched | reneged | unresolved
    match_time_s: float | None
    driver_id: int | None
    score: float | None


@dataclass
class SimResult:
    avg_score: float
    avg_match_time_s: float
    match_count: int
    per_ride: list[RideRecord]
    q_profile: NotificationProfile
    size_counts: list[int]
    driver_states: dict[str, int]
    events: list[tuple] | None = None

    def to_dict(self, per_ride: bool = False) -> dict:
        def num(x):
            return None if x is None or (isinstance(x, float) and math.isnan(x)) else x

        out = {
            "avg_score": num(self.avg_score),
            "avg_match_time_s": num(self.avg_match_time_s),
            "match_count": self.match_count,
            "q_profile": list(self.q_profile.q),
            "size_counts": list(self.size_counts),
            "driver_states": dict(self.driver_states),
        }
        if per_ride:
            out["per_ride"] = [r.__dict__ for r in self.per_ride]
        return out

    def to_json(self, path, per_ride: bool = False) -> None:
        Path(path).write_text(json.dumps(self.to_dict(per_ride), indent=2, sort_keys=True) + "\n")

    def write_rides_csv(self, path) -> None:
        write_rides_csv(self.per_ride, path)


def write_rides_csv(records: Sequence[RideRecord], path, extra: Mapping[str, object] | None = None) -> None:
    extra = dict(extra or {})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(extra) + ["rider_id", "outcome", "match_time_s", "driver_id", "score"])
        for r in records:
            w.writerow(
                list(extra.values())
                + [
                    r.rider_id,
                    r.outcome,
                    "" if r.match_time_s is None else repr(r.match_time_s),
                    "" if r.driver_id is None else r.driver_id,
                    "" if r.score is None else repr(r.score),
                ]
            )


def q_profile_of(result: SimResult) -> NotificationProfile:
    """Observed distribution of notification-set sizes per rider-epoch."""
    return NotificationProfile.from_counts(result.size_counts)


class _Notice:
    """One ride's live notification set."""

    __slots__ = ("rider", "ranked", "outstanding", "accepted", "history", "due", "will_accept", "issued")

    def __init__(self, rider, ranked, due, will_accept, issued):
        self.rider = rider
        self.ranked = ranked  # driver ids by descending score, ties by id
        self.outstanding = set(ranked)
        self.accepted: list[int] = []  # live acceptances in arrival order
        self.history: list[int] = []  # every acceptance ever recorded
        self.due = due
        self.will_accept = will_accept
        self.issued = issued


class _Market:
    def __init__(self, scenario: Scenario, packer, config: SimConfig, params: MarketParams):
        self.sc = scenario
        self.packer = packer
        self.cfg = config
        self.params = params
        self.protocol = config.protocol
        cs = config.cycle_seconds
        self.rider_cycle = {r.id: int(math.floor(r.arrival_time / cs)) for r in scenario.riders}
        self.driver_cycle = {d.id: int(math.floor(d.arrival_time / cs)) for d in scenario.drivers}
        late = [i for i, c in self.rider_cycle.items() if c >= config.horizon_cycles]
        late += [i for i, c in self.driver_cycle.items() if c >= config.horizon_cycles]
        if late:
            raise ValidationError(f"arrival times beyond the horizon for ids {sorted(late)[:5]}")
        self.arrivals_r: dict[int, list[int]] = {}
        for i, c in sorted(self.rider_cycle.items()):
            self.arrivals_r.setdefault(c, []).append(i)
        self.arrivals_d: dict[int, list[int]] = {}
        for i, c in sorted(self.driver_cycle.items()):
            self.arrivals_d.setdefault(c, []).append(i)
        self.arrival_time = {r.id: r.arrival_time for r in scenario.riders}
        self.true_p = scenario.accept_probs
        self.nbrs: dict[int, dict[int, float]] = {}
        for (r, d), w in scenario.weights.items():
            self.nbrs.setdefault(r, {})[d] = w

        self.rstate: dict[int, RiderState] = {}
        self.dstate: dict[int, DriverState] = {}
        self.available_from: dict[int, int] = {}  # driver or rider cooldowns (separate dicts)
        self.rider_ready: dict[int, int] = {}
        self.notice_of: dict[int, _Notice] = {}  # rider -> live notice
        self.holder: dict[int, int] = {}  # driver -> rider whose notice it holds
        self.outcome: dict[int, tuple] = {}
        self.size_counts = [0] * (params.cap_u + 1)
        self.events: list[tuple] | None = [] if config.record_events else None

        ss = np.random.SeedSequence(config.seed)
        s_abandon, s_resp, s_pack = ss.spawn(3)
        self.rng_abandon = np.random.default_rng(s_abandon)
        self.rng_resp = np.random.default_rng(s_resp)
        self.rng_pack = np.random.default_rng(s_pack)

    # -- helpers --------------------------------------------------------

    def log(self, *ev):
        if self.events is not None:
            self.events.append(ev)

    def release_driver(self, d: int, cycle: int):
        self.holder.pop(d, None)
        self.dstate[d] = DriverState.IDLE
        self.available_from[d] = cycle + 1

    def close_notice(self, note: _Notice, cycle: int, keep: int | None = None):
        """Release every driver still attached to ``note`` except ``keep``."""
        for d in sorted(note.outstanding | set(note.accepted)):
            if d == keep or self.holder.get(d) != note.rider:
                continue
            if note.issued is not None and d in note.outstanding:
                self.log(cycle, "withdraw", note.rider, d)
            self.release_driver(d, cycle)
        note.outstanding.clear()
        del self.notice_of[note.rider]

    def finalize(self, note: _Notice, d: int, cycle: int):
        r = note.rider
        if self.cfg.check_invariants:
            self.check_finalization(note, d)
        self.close_notice(note, cycle, keep=d)
        self.holder.pop(d, None)
        self.dstate[d] = DriverState.MATCHED
        self.rstate[r] = RiderState.MATCHED
        t = cycle * self.cfg.cycle_seconds - self.arrival_time[r]
        self.outcome[r] = ("matched", float(t), d, self.nbrs[r][d])
        self.log(cycle, "match", r, d)

    def check_finalization(self, note: _Notice, d: int):
        if self.protocol.kind == "FA" and len(note.history) != 1:
            raise InvariantViolation(f"FA ride {note.rider} finalised with {len(note.history)} acceptances")
        w = self.nbrs[note.rider]
        if self.protocol.kind == "BA" and any(w[x] > w[d] for x in note.history):
            raise InvariantViolation(f"BA ride {note.rider} finalised below a recorded acceptance")

    # -- cycle phases ---------------------------------------------------

    def inject(self, cycle: int):
        for r in self.arrivals_r.get(cycle, ()):
            self.rstate[r] = RiderState.WAITING
            self.rider_ready[r] = cycle
        for d in self.arrivals_d.get(cycle, ()):
            self.dstate[d] = DriverState.IDLE
            self.available_from[d] = cycle

    def abandon(self, cycle: int):
        cfg = self.cfg
        rng = self.rng_abandon
        riders = sorted(r for r, s in self.rstate.items() if s in (RiderState.WAITING, RiderState.NOTIFIED, RiderState.ACCEPTED))
        if riders and cfg.rider_renege_prob > 0:
            draws = rng.random(len(riders))
            for r, u in zip(riders, draws):
                if u < cfg.rider_renege_prob:
                    note = self.notice_of.get(r)
                    if note is not None:
                        self.close_notice(note, cycle)
                    self.rstate[r] = RiderState.RENEGED
                    self.outcome[r] = ("reneged", None, None, None)
                    self.log(cycle, "renege", r, None)
        idle = sorted(d for d, s in self.dstate.items() if s is DriverState.IDLE)
        if idle and cfg.idle_driver_exit_prob > 0:
            draws = rng.random(len(idle))
            for d, u in zip(idle, draws):
                if u < cfg.idle_driver_exit_prob:
                    self.dstate[d] = DriverState.DEPARTED
                    self.log(cycle, "exit", None, d)
        notified = sorted(d for d, s in self.dstate.items() if s is DriverState.NOTIFIED)
        if notified and cfg.notified_driver_exit_prob > 0:
            draws = rng.random(len(notified))
            for d, u in zip(notified, draws):
                if u < cfg.notified_driver_exit_prob:
                    r = self.holder.pop(d)
                    self.notice_of[r].outstanding.discard(d)
                    self.dstate[d] = DriverState.DEPARTED
                    self.log(cycle, "exit", r, d)

    def respond(self, cycle: int):
        for r in sorted(self.notice_of):
            note = self.notice_of[r]
            due = sorted(d for d in note.outstanding if note.due[d] == cycle)
            for d in due:
                note.outstanding.discard(d)
                if note.will_accept[d]:
                    note.accepted.append(d)
                    note.history.append(d)
                    self.dstate[d] = DriverState.ACCEPTED_PENDING
                    self.rstate[r] = RiderState.ACCEPTED
                    self.log(cycle, "accept", r, d)
                    if self.protocol.kind == "FA":
                        break  # lowest id among same-cycle acceptances wins
                else:
                    self.release_driver(d, cycle)
                    self.log(cycle, "reject", r, d)
            self.resolve(note, cycle)

    def resolve(self, note: _Notice, cycle: int):
        r = note.rider
        kind = self.protocol.kind
        if kind == "FA":
            if note.accepted:
                self.finalize(note, note.accepted[0], cycle)
                return
        elif kind == "BA":
            if note.accepted:
                rank = {d: i for i, d in enumerate(note.ranked)}
                best = min(note.accepted, key=rank.__getitem__)
                for d in sorted(note.accepted):
                    if d != best:
                        note.accepted.remove(d)
                        self.release_driver(d, cycle)
                for d in sorted(note.outstanding):
                    if rank[d] > rank[best]:
                        note.outstanding.discard(d)
                        self.release_driver(d, cycle)
                        self.log(cycle, "withdraw", r, d)
                if not note.outstanding:
                    self.finalize(note, best, cycle)
                return
        else:
            k = self.protocol.k
            if note.accepted and (len(note.accepted) >= k or not note.outstanding):
                first = note.accepted[:k]
                w = self.nbrs[r]
                best = min(first, key=lambda d: (-w[d], d))
                for d in note.accepted[k:]:
                    self.release_driver(d, cycle)
                note.accepted = first
                self.finalize(note, best, cycle)
                return
        if not note.outstanding and not note.accepted:
            del self.notice_of[r]
            self.rstate[r] = RiderState.WAITING
            self.rider_ready[r] = cycle + 1
            self.log(cycle, "return", r, None)

    def dispatch(self, cycle: int):
        cfg = self.cfg
        riders = sorted(
            r for r, s in self.rstate.items() if s is RiderState.WAITING and self.rider_ready[r] <= cycle
        )
        drivers = sorted(
            d for d, s in self.dstate.items() if s is DriverState.IDLE and self.available_from[d] <= cycle
        )
        if not riders:
            return
        dset = set(drivers)
        weights = {}
        for r in riders:
            for d, w in self.nbrs.get(r, {}).items():
                if d in dset:
                    weights[(r, d)] = w
        if cfg.homogeneous_p is not None:
            probs = {d: cfg.homogeneous_p for d in drivers}
        elif cfg.ar_gap_visible and cfg.ar_gap > 0:
            probs = {d: (1.0 - cfg.ar_gap) * self.true_p[d] for d in drivers}
        else:
            probs = {d: self.true_p[d] for d in drivers}
        snap = CycleSnapshot(tuple(riders), tuple(drivers), weights, probs)
        if not weights:
            self.size_counts[0] += len(riders)
            return
        try:
            plan = self.packer(snap, self.params, self.protocol, self.rng_pack, cfg.packing)
        except Exception as exc:
            raise PackerFailure(cycle, exc) from exc
        rng = self.rng_resp
        for r in riders:
            w = self.nbrs[r] if r in self.nbrs else {}
            ds = tuple(sorted(plan.sets.get(r, ()), key=lambda d: (-w[d], d)))
            if len(ds) > self.params.cap_u:
                raise PackerFailure(cycle, ValueError(f"set of size {len(ds)} exceeds U"))
            self.size_counts[len(ds)] += 1
            if not ds:
                continue
            n = len(ds)
            if cfg.fixed_delay is not None:
                delays = [cfg.fixed_delay] * n
            else:
                delays = rng.integers(1, cfg.response_window_cycles + 1, size=n).tolist()
            scale = (1.0 - cfg.ar_gap) if n > 1 else 1.0
            draws = rng.random(n)
            due, accept = {}, {}
            for d, lag, u in zip(ds, delays, draws):
                if self.holder.get(d) is not None or self.dstate[d] is not DriverState.IDLE:
                    raise PackerFailure(cycle, ValueError(f"driver {d} notified twice"))
                due[d] = cycle + int(lag)
                accept[d] = bool(u < scale * self.true_p[d])
                self.holder[d] = r
                self.dstate[d] = DriverState.NOTIFIED
                self.log(cycle, "notify", r, d)
            self.notice_of[r] = _Notice(r, ds, due, accept, cycle)
            self.rstate[r] = RiderState.NOTIFIED

    def check(self, cycle: int):
        seen: dict[int, int] = {}
        for r, note in self.notice_of.items():
            if self.rstate[r] not in (RiderState.NOTIFIED, RiderState.ACCEPTED):
                raise InvariantViolation(f"cycle {cycle}: rider {r} holds a notice in state {self.rstate[r]}")
            for d in note.outstanding:
                if self.dstate[d] is not DriverState.NOTIFIED:
                    raise InvariantViolation(f"cycle {cycle}: outstanding driver {d} in state {self.dstate[d]}")
            for d in note.accepted:
                if self.dstate[d] is not DriverState.ACCEPTED_PENDING:
                    raise InvariantViolation(f"cycle {cycle}: accepted driver {d} in state {self.dstate[d]}")
            for d in note.outstanding | set(note.accepted):
                if d in seen:
                    raise InvariantViolation(f"cycle {cycle}: driver {d} holds notices of riders {seen[d]} and {r}")
                seen[d] = r
        for r, s in self.rstate.items():
            if s in (RiderState.NOTIFIED, RiderState.ACCEPTED) and r not in self.notice_of:
                raise InvariantViolation(f"cycle {cycle}: rider {r} is {s.value} without a notice")
        for d, s in self.dstate.items():
            if s in (DriverState.NOTIFIED, DriverState.ACCEPTED_PENDING) and d not in seen:
                raise InvariantViolation(f"cycle {cycle}: driver {d} is {s.value} without a notice")
        n_r = sum(1 for s in self.rstate.values() if s is RiderState.MATCHED)
        n_d = sum(1 for s in self.dstate.values() if s is DriverState.MATCHED)
        if n_r != n_d:
            raise InvariantViolation(f"cycle {cycle}: {n_r} matched riders but {n_d} matched drivers")

    def run(self) -> SimResult:
        for cycle in range(self.cfg.horizon_cycles):
            self.inject(cycle)
            self.abandon(cycle)
            self.respond(cycle)
            self.dispatch(cycle)
            if self.cfg.check_invariants:
                self.check(cycle)
        return self.result()

    def result(self) -> SimResult:
        records = []
        scores, times = [], []
        for r in sorted(self.rstate):
            out = self.outcome.get(r)
            if out is None:
                records.append(RideRecord(r, "unresolved", None, None, None))
                continue
            kind, t, d, w = out
            records.append(RideRecord(r, kind, t, d, w))
            if kind == "matched":
                scores.append(w)
                times.append(t)
        states = {s.value: 0 for s in DriverState}
        for s in self.dstate.values():
            states[s.value] += 1
        return SimResult(
            avg_score=float(np.mean(scores)) if scores else math.nan,
            avg_match_time_s=float(np.mean(times)) if times else math.nan,
            match_count=len(scores),
            per_ride=records,
            q_profile=NotificationProfile.from_counts(self.size_counts),
            size_counts=list(self.size_counts),
            driver_states=states,
            events=self.events,
        )


def run_simulation(scenario: Scenario, packer, config: SimConfig, params: MarketParams) -> SimResult:
    """Simulate one market run; deterministic given ``config.seed``."""
    if isinstance(packer, str):
        packer = get_packer(packer)
    if config.protocol.kind == "KACCEPT" and config.protocol.k > params.cap_u:
        raise ValidationError(f"k = {config.protocol.k} exceeds U = {params.cap_u}")
    return _Market(scenario, packer, config, params).run()


# --- Monte Carlo ---------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSource:
    """Picklable generator of Gaussian markets with timed arrivals."""

    n_riders: int = 80
    n_drivers: int = 100
    sigma: float = 1.0
    type_mix: Mapping[float, float] = field(default_factory=lambda: dict(DEFAULT_TYPE_MIX))
    radius: float | None = 1.0
    arrival_window_s: float = 600.0

    def __call__(self, seed) -> Scenario:
        return sample_scenario(
            self.n_riders,
            self.n_drivers,
            self.sigma,
            self.type_mix,
            seed,
            radius=self.radius,
            arrival_window_s=self.arrival_window_s,
        )


@dataclass
class MonteCarloResult:
    results: list[SimResult]
    aggregate: dict[str, tuple[float, float]]

    def metric(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.results], dtype=float)

    def to_dict(self) -> dict:
        return {
            "n_instances": len(self.results),
            "aggregate": {k: {"mean": _num(m), "std": _num(s)} for k, (m, s) in self.aggregate.items()},
            "instances": [r.to_dict() for r in self.results],
        }


def _num(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def aggregate(results: Sequence[SimResult]) -> dict[str, tuple[float, float]]:
    """Arithmetic mean and sample std of each metric (NaNs skipped)."""
    out = {}
    for name in METRICS:
        vals = np.array([getattr(r, name) for r in results], dtype=float)
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            out[name] = (math.nan, math.nan)
            continue
        std = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
        out[name] = (float(np.mean(vals)), std)
    return out


def _instance_seeds(seed: int, n: int) -> list[tuple[int, int]]:
    children = np.random.SeedSequence(seed).spawn(n)
    out = []
    for child in children:
        a, b = child.generate_state(2, dtype=np.uint32)
        out.append((int(a), int(b)))
    return out


def _one(args):
    source, packer, config, params, scn_seed, sim_seed = args
    scenario = source(scn_seed) if callable(source) else source
    return run_simulation(scenario, packer, config.replace(seed=sim_seed), params)


def _map(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


def run_monte_carlo(
    scenario_source: Scenario | Callable[[int], Scenario],
    packer,
    config: SimConfig,
    params: MarketParams,
    n_instances: int,
    jobs: int = 1,
) -> MonteCarloResult:
    """Independent seeded runs; instance ``i`` draws its market (when the
    source is a generator) and its simulation stream from child ``i`` of
    ``config.seed``. Results are returned in instance order."""
    if n_instances < 1:
        raise ValidationError("n_instances must be at least 1")
    seeds = _instance_seeds(config.seed, n_instances)
    tasks = [(scenario_source, packer, config, params, a, b) for a, b in seeds]
    results = _map(_one, tasks, jobs)
    return MonteCarloResult(results, aggregate(results))


def compare_policies(
    scenario_source,
    policies: Mapping[str, tuple],
    n_instances: int,
    seed: int,
    jobs: int = 1,
) -> dict[str, MonteCarloResult]:
    """Run several ``(packer, config, params)`` policies on the same markets
    and simulation seeds, so metrics can be compared instance by instance."""
    out = {}
    for name, (packer, config, params) in policies.items():
        out[name] = run_monte_carlo(scenario_source, packer, config.replace(seed=seed), params, n_instances, jobs)
    return out


def bootstrap_mean_diff(a, b, n_boot: int = 2000, seed: int = 0, level: float = 0.95, paired: bool = True):
    """Bootstrap interval for ``mean(a) - mean(b)``.

    Returns ``(diff, lower, upper)`` where ``lower`` is the one-sided
    ``level`` lower bound and ``upper`` the one-sided upper bound.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    rng = np.random.default_rng(seed)
    if paired:
        mask = ~(np.isnan(a) | np.isnan(b))
        diff = a[mask] - b[mask]
        idx = rng.integers(0, diff.size, size=(n_boot, diff.size))
        boots = diff[idx].mean(axis=1)
        point = float(diff.mean())
    else:
        a = a[~np.isnan(a)]
        b = b[~np.isnan(b)]
        boots = (
            a[rng.integers(0, a.size, size=(n_boot, a.size))].mean(axis=1)
            - b[rng.integers(0, b.size, size=(n_boot, b.size))].mean(axis=1)
        )
        point = float(a.mean() - b.mean())
    return point, float(np.quantile(boots, 1 - level)), float(np.quantile(boots, level))
