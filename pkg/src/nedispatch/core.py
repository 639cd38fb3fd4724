"""Domain types, synthetic scenarios, trace ingestion and the proxy score."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "DEFAULT_TYPE_MIX",
    "Driver",
    "DriverState",
    "DRIVER_TRANSITIONS",
    "MarketParams",
    "NotificationPlan",
    "NotificationProfile",
    "Rider",
    "RiderState",
    "RIDER_TRANSITIONS",
    "Scenario",
    "TraceError",
    "ValidationError",
    "load_trace",
    "sample_scenario",
    "score",
    "validate_plan",
    "write_trace",
]

#: Driver acceptance types: level -> population share.
DEFAULT_TYPE_MIX: Mapping[float, float] = MappingProxyType(
    {0.1: 0.1, 0.33: 0.3, 0.66: 0.3, 0.9: 0.3}
)


class ValidationError(ValueError):
    """Raised when a domain object violates its invariants."""


class TraceError(ValueError):
    """Raised when a trace file cannot be parsed."""


class DriverState(str, enum.Enum):
    IDLE = "idle"
    NOTIFIED = "notified"
    ACCEPTED_PENDING = "accepted-pending"
    MATCHED = "matched"
    DEPARTED = "departed"


class RiderState(str, enum.Enum):
    WAITING = "waiting"
    NOTIFIED = "notified"
    ACCEPTED = "accepted-state"
    MATCHED = "matched"
    RENEGED = "reneged"


DRIVER_TRANSITIONS: Mapping[DriverState, frozenset] = MappingProxyType(
    {
        DriverState.IDLE: frozenset({DriverState.NOTIFIED, DriverState.DEPARTED}),
        DriverState.NOTIFIED: frozenset(
            {
                DriverState.IDLE,
                DriverState.ACCEPTED_PENDING,
                DriverState.MATCHED,
                DriverState.DEPARTED,
            }
        ),
        DriverState.ACCEPTED_PENDING: frozenset(
            {DriverState.IDLE, DriverState.MATCHED, DriverState.DEPARTED}
        ),
        DriverState.MATCHED: frozenset(),
        DriverState.DEPARTED: frozenset(),
    }
)

RIDER_TRANSITIONS: Mapping[RiderState, frozenset] = MappingProxyType(
    {
        RiderState.WAITING: frozenset({RiderState.NOTIFIED, RiderState.RENEGED}),
        RiderState.NOTIFIED: frozenset(
            {
                RiderState.WAITING,
                RiderState.ACCEPTED,
                RiderState.MATCHED,
                RiderState.RENEGED,
            }
        ),
        RiderState.ACCEPTED: frozenset({RiderState.MATCHED, RiderState.RENEGED}),
        RiderState.MATCHED: frozenset(),
        RiderState.RENEGED: frozenset(),
    }
)


@dataclass(frozen=True)
class MarketParams:
    """Rates of the fluid model plus the per-cycle dispatch bounds.

    ``cap_u`` is the largest notification set allowed for one ride and
    ``theta`` the opportunity cost charged per unit of acceptance probability.
    """

    lambda_r: float = 1.2
    lambda_d: float = 1.0
    mu: float = 0.1
    p: float = 0.4
    eta: float = 0.01
    eta_idle: float = 0.01
    eta_notified: float = 0.0
    cap_u: int = 3
    theta: float = 0.0

    def __post_init__(self):
        for name in ("lambda_r", "lambda_d", "mu", "eta", "eta_idle", "eta_notified", "theta"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValidationError(f"{name} must be a finite non-negative number, got {value!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValidationError(f"p must lie in [0, 1], got {self.p!r}")
        if int(self.cap_u) != self.cap_u or self.cap_u < 1:
            raise ValidationError(f"cap_u must be a positive integer, got {self.cap_u!r}")
        object.__setattr__(self, "cap_u", int(self.cap_u))

    def replace(self, **changes) -> "MarketParams":
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(changes)
        return MarketParams(**values)


@dataclass(frozen=True)
class Driver:
    id: int
    pos: tuple[float, float]
    accept_prob: float
    arrival_time: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.accept_prob <= 1.0:
            raise ValidationError(
                f"driver {self.id}: accept_prob must lie in [0, 1], got {self.accept_prob!r}"
            )
        if self.arrival_time < 0:
            raise ValidationError(f"driver {self.id}: negative arrival time")

    @property
    def reject_prob(self) -> float:
        return 1.0 - self.accept_prob


@dataclass(frozen=True)
class Rider:
    id: int
    pos: tuple[float, float]
    arrival_time: float = 0.0

    def __post_init__(self):
        if self.arrival_time < 0:
            raise ValidationError(f"rider {self.id}: negative arrival time")


@dataclass(frozen=True)
class Scenario:
    """Riders, drivers and the sparse score map between them.

    A missing ``(rider_id, driver_id)`` key in ``weights`` marks an
    infeasible pair.
    """

    riders: tuple[Rider, ...]
    drivers: tuple[Driver, ...]
    weights: Mapping[tuple[int, int], float]
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "riders", tuple(self.riders))
        object.__setattr__(self, "drivers", tuple(self.drivers))
        rider_ids = [r.id for r in self.riders]
        driver_ids = [d.id for d in self.drivers]
        if len(set(rider_ids)) != len(rider_ids):
            raise ValidationError("duplicate rider id")
        if len(set(driver_ids)) != len(driver_ids):
            raise ValidationError("duplicate driver id")
        rset, dset = set(rider_ids), set(driver_ids)
        for (r, d), w in self.weights.items():
            if r not in rset or d not in dset:
                raise ValidationError(f"weight key {(r, d)} references an unknown id")
            if not (w >= 0 and math.isfinite(w)):
                raise ValidationError(f"weight {(r, d)} must be finite and non-negative")
        object.__setattr__(self, "weights", MappingProxyType(dict(self.weights)))
        object.__setattr__(self, "meta", MappingProxyType(dict(self.meta)))

    def rider(self, rider_id: int) -> Rider:
        return self._rider_index()[rider_id]

    def driver(self, driver_id: int) -> Driver:
        return self._driver_index()[driver_id]

    def _rider_index(self) -> dict[int, Rider]:
        idx = self.__dict__.get("_rider_idx")
        if idx is None:
            idx = {r.id: r for r in self.riders}
            object.__setattr__(self, "_rider_idx", idx)
        return idx

    def _driver_index(self) -> dict[int, Driver]:
        idx = self.__dict__.get("_driver_idx")
        if idx is None:
            idx = {d.id: d for d in self.drivers}
            object.__setattr__(self, "_driver_idx", idx)
        return idx

    @property
    def accept_probs(self) -> dict[int, float]:
        return {d.id: d.accept_prob for d in self.drivers}


@dataclass(frozen=True)
class NotificationProfile:
    """Distribution ``(q_0, ..., q_U)`` of notification-set sizes per epoch."""

    q: tuple[float, ...]

    def __post_init__(self):
        q = tuple(float(x) for x in self.q)
        if len(q) < 2:
            raise ValidationError("a notification profile needs at least q_0 and q_1")
        if any(x < -1e-12 for x in q):
            raise ValidationError(f"negative entry in notification profile {q}")
        if abs(sum(q) - 1.0) > 1e-9:
            raise ValidationError(f"notification profile sums to {sum(q)!r}, not 1")
        object.__setattr__(self, "q", tuple(max(x, 0.0) for x in q))

    @property
    def cap_u(self) -> int:
        return len(self.q) - 1

    def as_array(self) -> np.ndarray:
        return np.asarray(self.q, dtype=float)

    @classmethod
    def degenerate(cls, cap_u: int) -> "NotificationProfile":
        """Profile in which no waiting rider is ever notified."""
        return cls((1.0,) + (0.0,) * cap_u)

    @classmethod
    def from_counts(cls, counts: Sequence[float]) -> "NotificationProfile":
        counts = np.asarray(counts, dtype=float)
        total = counts.sum()
        if total <= 0:
            return cls.degenerate(len(counts) - 1)
        return cls(tuple(counts / total))


@dataclass(frozen=True)
class NotificationPlan:
    """Disjoint notification sets: rider id -> driver ids by descending score."""

    sets: Mapping[int, tuple[int, ...]]

    def __post_init__(self):
        object.__setattr__(
            self,
            "sets",
            MappingProxyType({r: tuple(ds) for r, ds in sorted(self.sets.items())}),
        )

    def size_of(self, rider_id: int) -> int:
        return len(self.sets.get(rider_id, ()))

    def notified_drivers(self) -> list[int]:
        return [d for ds in self.sets.values() for d in ds]

    def __len__(self) -> int:
        return sum(1 for ds in self.sets.values() if ds)


def score(rider: Rider, driver: Driver) -> float:
    """Proxy match score ``1 / (1 + distance)`` between a rider and a driver."""
    dx = rider.pos[0] - driver.pos[0]
    dy = rider.pos[1] - driver.pos[1]
    return 1.0 / (1.0 + math.hypot(dx, dy))


def _score_map(riders, drivers, radius):
    weights = {}
    if not riders or not drivers:
        return weights
    rp = np.array([r.pos for r in riders], dtype=float)
    dp = np.array([d.pos for d in drivers], dtype=float)
    dist = np.hypot(rp[:, None, 0] - dp[None, :, 0], rp[:, None, 1] - dp[None, :, 1])
    for i, r in enumerate(riders):
        for j, d in enumerate(drivers):
            if radius is None or dist[i, j] <= radius:
                weights[(r.id, d.id)] = float(1.0 / (1.0 + dist[i, j]))
    return weights


def _check_type_mix(type_mix: Mapping[float, float]) -> tuple[np.ndarray, np.ndarray]:
    levels = np.array(list(type_mix.keys()), dtype=float)
    shares = np.array(list(type_mix.values()), dtype=float)
    if levels.size == 0:
        raise ValidationError("type_mix is empty")
    if np.any(shares < 0) or abs(shares.sum() - 1.0) > 1e-9:
        raise ValidationError(f"type_mix shares must be non-negative and sum to 1, got {shares.sum()!r}")
    if np.any((levels < 0) | (levels > 1)):
        raise ValidationError("type_mix levels must be probabilities")
    return levels, shares


def sample_scenario(
    n_riders: int,
    n_drivers: int,
    sigma: float = 1.0,
    type_mix: Mapping[float, float] = DEFAULT_TYPE_MIX,
    seed: int = 0,
    *,
    radius: float | None = None,
    arrival_window_s: float = 0.0,
) -> Scenario:
    """Draw a synthetic Gaussian market.

    Positions are i.i.d. ``N(0, sigma^2)`` per coordinate, acceptance
    probabilities are drawn from ``type_mix`` and scores are computed for
    every pair within ``radius`` (all pairs when ``radius`` is None). With
    ``arrival_window_s > 0`` arrival times are uniform on that window,
    otherwise everyone is present at time zero.
    """
    if n_riders < 0 or n_drivers < 0:
        raise ValidationError("counts must be non-negative")
    if not sigma > 0:
        raise ValidationError(f"sigma must be positive, got {sigma!r}")
    if arrival_window_s < 0:
        raise ValidationError("arrival_window_s must be non-negative")
    levels, shares = _check_type_mix(type_mix)

    rng = np.random.default_rng(seed)
    rider_pos = rng.normal(0.0, sigma, size=(n_riders, 2))
    driver_pos = rng.normal(0.0, sigma, size=(n_drivers, 2))
    probs = levels[rng.choice(len(levels), size=n_drivers, p=shares)]
    if arrival_window_s > 0:
        rider_t = np.sort(rng.uniform(0.0, arrival_window_s, size=n_riders))
        driver_t = np.sort(rng.uniform(0.0, arrival_window_s, size=n_drivers))
    else:
        rider_t = np.zeros(n_riders)
        driver_t = np.zeros(n_drivers)

    riders = [
        Rider(i, (float(rider_pos[i, 0]), float(rider_pos[i, 1])), float(rider_t[i]))
        for i in range(n_riders)
    ]
    drivers = [
        Driver(j, (float(driver_pos[j, 0]), float(driver_pos[j, 1])), float(probs[j]), float(driver_t[j]))
        for j in range(n_drivers)
    ]
    return Scenario(
        riders,
        drivers,
        _score_map(riders, drivers, radius),
        {"seed": seed, "sigma": sigma, "radius": radius},
    )


_RIDER_HEADER = ["id", "arrival_time_s", "x", "y"]
_DRIVER_HEADER = ["id", "arrival_time_s", "x", "y", "accept_prob"]


def _read_rows(path: Path, header: list[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            return
        if [h.strip() for h in first] != header:
            raise TraceError(f"{path}:1: expected header {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise TraceError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                values = [int(row[0])] + [float(c) for c in row[1:]]
            except ValueError as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in values[1:]):
                raise TraceError(f"{path}:{lineno}: non-finite value")
            yield lineno, values


def load_trace(
    riders_path: str | Path,
    drivers_path: str | Path,
    *,
    radius: float | None = None,
) -> Scenario:
    """Read a rider CSV and a driver CSV into a :class:`Scenario`."""
    riders_path, drivers_path = Path(riders_path), Path(drivers_path)
    for p in (riders_path, drivers_path):
        if not p.exists():
            raise FileNotFoundError(f"trace file not found: {p}")
    riders, drivers = [], []
    seen: set[int] = set()
    for lineno, (rid, t, x, y) in _read_rows(riders_path, _RIDER_HEADER):
        if rid in seen:
            raise ValidationError(f"{riders_path}:{lineno}: duplicate rider id {rid}")
        seen.add(rid)
        try:
            riders.append(Rider(rid, (x, y), t))
        except ValidationError as exc:
            raise ValidationError(f"{riders_path}:{lineno}: {exc}") from None
    seen = set()
    for lineno, (did, t, x, y, prob) in _read_rows(drivers_path, _DRIVER_HEADER):
        if did in seen:
            raise ValidationError(f"{drivers_path}:{lineno}: duplicate driver id {did}")
        seen.add(did)
        try:
            drivers.append(Driver(did, (x, y), prob, t))
        except ValidationError as exc:
            raise ValidationError(f"{drivers_path}:{lineno}: {exc}") from None
    return Scenario(
        riders,
        drivers,
        _score_map(riders, drivers, radius),
        {"riders_path": str(riders_path), "drivers_path": str(drivers_path), "radius": radius},
    )


def write_trace(scenario: Scenario, riders_path: str | Path, drivers_path: str | Path) -> None:
    """Write ``scenario`` in the two-file CSV trace format."""
    with open(riders_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_RIDER_HEADER)
        for r in scenario.riders:
            w.writerow([r.id, repr(r.arrival_time), repr(r.pos[0]), repr(r.pos[1])])
    with open(drivers_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_DRIVER_HEADER)
        for d in scenario.drivers:
            w.writerow([d.id, repr(d.arrival_time), repr(d.pos[0]), repr(d.pos[1]), repr(d.accept_prob)])


def validate_plan(plan: NotificationPlan, scenario, params: MarketParams, protocol, probs=None) -> list[str]:
    """List every constraint of the packing program that ``plan`` violates.

    ``scenario`` is a :class:`Scenario` or a cycle snapshot (anything with
    ``weights`` and ``probs``). ``probs`` overrides the acceptance
    probabilities the marginal-threshold check uses. An empty list means the
    plan is feasible.
    """
    from .valuation import value

    weights = scenario.weights
    if probs is None:
        probs = getattr(scenario, "probs", None)
        if probs is None:
            probs = scenario.accept_probs
    if isinstance(scenario, Scenario):
        known_riders = {r.id for r in scenario.riders}
    else:
        known_riders = set(scenario.riders)
    violations = []
    owner: dict[int, int] = {}
    for r, ds in plan.sets.items():
        if r not in known_riders:
            raise ValidationError(f"plan references unknown rider {r}")
        for d in ds:
            if d not in probs:
                raise ValidationError(f"plan references unknown driver {d}")
            if (r, d) not in weights:
                violations.append(f"infeasible pair: rider {r}, driver {d} has no score")
            if d in owner:
                violations.append(f"disjointness: driver {d} notified for riders {owner[d]} and {r}")
            else:
                owner[d] = r
        if len(ds) > params.cap_u:
            violations.append(f"cardinality: rider {r} has {len(ds)} > U={params.cap_u} drivers")
    for r, ds in plan.sets.items():
        if not ds or any((r, d) not in weights for d in ds):
            continue
        offers = [(weights[(r, d)], probs[d]) for d in ds]
        full = value(protocol, offers)
        for i, d in enumerate(ds):
            gain = full - value(protocol, offers[:i] + offers[i + 1:])
            if gain < params.theta * probs[d] - 1e-12:
                violations.append(
                    f"threshold: rider {r}, driver {d} marginal {gain:.6g} < theta*p = {params.theta * probs[d]:.6g}"
                )
    return violations
