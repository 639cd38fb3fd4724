"""Fluid marketplace model: flow balance, closed-form equilibria and the
absorbing rider-lifecycle chain.

Notation used throughout: ``beta = mu (1 - p) + eta_notified`` is the rate at
which one outstanding notification is lost (rejection or driver churn), and

    c_j = j beta / (eta + j (mu + eta_notified))

is the chance that a rider with ``j`` outstanding notifications loses one
before being matched or reneging. Products of ``c_j`` divided by ``beta`` are
always evaluated in cancelled form so that ``beta = 0`` is safe.

Time is measured in units of the dispatch epoch (waiting riders are
(re)notified at rate one).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import MarketParams, NotificationProfile
from .valuation import Protocol

__all__ = [
    "AbsorptionMetrics",
    "AbsorptionModel",
    "DegenerateModel",
    "FluidState",
    "SupplyInfeasible",
    "absorption_metrics",
    "aggregate_residual",
    "ba_equilibrium",
    "ba_flow_residual",
    "build_generator",
    "equilibrium",
    "fa_equilibrium",
    "fa_flow_residual",
    "flow_residual",
    "simulate_absorption",
    "solve_flow_linear",
]


class DegenerateModel(ValueError):
    """The model has no absorption (or a singular balance system)."""


class SupplyInfeasible(ValueError):
    """The closed form yields a negative idle-driver mass."""

    def __init__(self, d0: float):
        super().__init__(f"supply-infeasible parameters: idle-driver mass D0 = {d0:.6g} < 0")
        self.d0 = d0


@dataclass(frozen=True)
class FluidState:
    """Equilibrium masses. ``a`` holds ``A_2..A_U`` (empty under FA)."""

    r0: float
    r: tuple[float, ...]
    a: tuple[float, ...]
    d0: float
    d: tuple[float, ...]

    @property
    def cap_u(self) -> int:
        return len(self.r)

    def to_dict(self) -> dict:
        return {"r0": self.r0, "r": list(self.r), "a": list(self.a), "d0": self.d0, "d": list(self.d)}


def _profile(q) -> np.ndarray:
    if not isinstance(q, NotificationProfile):
        q = NotificationProfile(tuple(q))
    return q.as_array()


def _rates(params: MarketParams):
    beta = params.mu * (1.0 - params.p) + params.eta_notified
    return beta, params.mu + params.eta_notified


def _loss_chances(params: MarketParams, cap_u: int) -> np.ndarray:
    """``c[j]`` for ``j = 0..U`` (``c[0]`` unused)."""
    beta, total = _rates(params)
    j = np.arange(cap_u + 1, dtype=float)
    c = np.zeros(cap_u + 1)
    c[1:] = j[1:] * beta / (params.eta + j[1:] * total)
    return c


def _waiting_mass(params: MarketParams, q: np.ndarray) -> float:
    u = len(q) - 1
    c = _loss_chances(params, u)
    prods = np.cumprod(c[1:])
    denom = params.eta + float(np.sum(q[1:] * (1.0 - prods)))
    if not denom > 0:
        raise DegenerateModel(
            "degenerate: no absorption (waiting riders never leave: eta = 0 and no notification can succeed)"
        )
    return params.lambda_r / denom


def _notified_masses(params: MarketParams, q: np.ndarray, r0: float) -> np.ndarray:
    """``R_1..R_U`` from the downward recursion of the rider balance."""
    u = len(q) - 1
    c = _loss_chances(params, u)
    _, total = _rates(params)
    r = np.zeros(u + 2)
    # R_l (eta + l total) = R_0 q_l + (l+1) beta R_{l+1}; expanded as
    # R_l = R_0 / (eta + l total) * sum_{i>=l} q_i prod_{j=l+1}^{i} c_j
    for ell in range(u, 0, -1):
        acc = 0.0
        prod = 1.0
        for i in range(ell, u + 1):
            if i > ell:
                prod *= c[i]
            acc += q[i] * prod
        r[ell] = r0 * acc / (params.eta + ell * total)
    return r[1 : u + 1]


def _check_idle_rate(params: MarketParams):
    if not params.eta_idle > 0:
        raise DegenerateModel("degenerate: the idle-driver mass needs eta_idle > 0")


def fa_equilibrium(params: MarketParams, q) -> FluidState:
    """Closed-form steady state under First-Accept."""
    q = _profile(q)
    _check_idle_rate(params)
    u = len(q) - 1
    r0 = _waiting_mass(params, q)
    r = _notified_masses(params, q, r0)
    ell = np.arange(1, u + 1)
    d = ell * r
    # every notified driver leaves the notified pool for good at rate mu p + eta_N
    d0 = (params.lambda_d - (params.mu * params.p + params.eta_notified) * float(d.sum())) / params.eta_idle
    if d0 < 0:
        raise SupplyInfeasible(d0)
    return FluidState(float(r0), tuple(map(float, r)), (), float(d0), tuple(map(float, d)))


def _ranked_driver_masses(params: MarketParams, q: np.ndarray, r0: float) -> np.ndarray:
    """``D_1..D_U`` under Best-Accept.

    ``D_l = R_0 sum_{j>=l} [prod_{i=l}^{j} c_i] Q_j / (j beta)`` with
    ``Q_j = sum_{i>=j} q_i``; the ``j beta`` cancels against ``c_j``.
    """
    u = len(q) - 1
    c = _loss_chances(params, u)
    _, total = _rates(params)
    tail = np.cumsum(q[::-1])[::-1]
    d = np.zeros(u)
    for ell in range(1, u + 1):
        acc = 0.0
        prod = 1.0
        for j in range(ell, u + 1):
            acc += prod * tail[j] / (params.eta + j * total)
            prod *= c[j]
        d[ell - 1] = r0 * acc
    return d


def ba_equilibrium(params: MarketParams, q) -> FluidState:
    """Closed-form steady state under Best-Accept."""
    q = _profile(q)
    _check_idle_rate(params)
    u = len(q) - 1
    mu_p = params.mu * params.p
    _, total = _rates(params)
    c = _loss_chances(params, u)
    r0 = _waiting_mass(params, q)
    r = _notified_masses(params, q, r0)
    d = _ranked_driver_masses(params, q, r0)
    a = np.zeros(max(u - 1, 0))
    for ell in range(2, u + 1):
        # R_0 sum_{i>=l-1} q_i (1 - prod_{j=l}^{i} c_j), the i = l-1 term being zero
        acc = 0.0
        prod = 1.0
        for i in range(ell, u + 1):
            prod *= c[i]
            acc += q[i] * (1.0 - prod)
        a[ell - 2] = (r0 * acc - (params.eta + (ell - 1) * mu_p) * d[ell - 1]) / (params.eta + (ell - 1) * total)
    ell = np.arange(1, u + 1)
    released = float(np.sum(d * (params.eta + params.mu * (1 - params.p) + (ell - 1) * mu_p)))
    released += float(np.sum(a * (params.eta + (np.arange(2, u + 1) - 1) * mu_p)))
    d0 = (params.lambda_d + released - r0 * float(np.sum(ell * q[1:]))) / params.eta_idle
    if d0 < 0:
        raise SupplyInfeasible(d0)
    return FluidState(float(r0), tuple(map(float, r)), tuple(map(float, a)), float(d0), tuple(map(float, d)))


def equilibrium(protocol, params: MarketParams, q) -> FluidState:
    protocol = Protocol.parse(protocol)
    if protocol.kind == "FA":
        return fa_equilibrium(params, q)
    if protocol.kind == "BA":
        return ba_equilibrium(params, q)
    raise ValueError(f"the fluid model covers FA and BA only, not {protocol}")


# --- flow equations ------------------------------------------------------


def _rider_block(params, q, state) -> list[float]:
    u = len(q) - 1
    beta, total = _rates(params)
    r = list(state.r) + [0.0]
    out = []
    for ell in range(1, u + 1):
        lhs = r[ell - 1] * (params.eta + ell * total)
        rhs = state.r0 * q[ell] + (ell + 1) * r[ell] * beta
        out.append(lhs - rhs)
    out.append(state.r0 * (params.eta + float(q[1:].sum())) - (params.lambda_r + r[0] * beta))
    return out


def _check_dims(q, state: FluidState, with_a: bool):
    u = len(q) - 1
    if len(state.r) != u or len(state.d) != u:
        raise ValueError(f"state dimensions do not match U = {u}")
    if with_a and len(state.a) != max(u - 1, 0):
        raise ValueError(f"BA state needs {u - 1} accepted-state masses")


def fa_flow_residual(params: MarketParams, q, state: FluidState) -> np.ndarray:
    """LHS - RHS of the First-Accept flow equations.

    Order: rider balance for ``l = 1..U``, waiting-rider balance, driver
    balance.
    """
    q = _profile(q)
    _check_dims(q, state, False)
    u = len(q) - 1
    out = _rider_block(params, q, state)
    ell = np.arange(1, u + 1)
    d = np.asarray(state.d)
    lhs = state.d0 * params.eta_idle + state.r0 * float(np.sum(ell * q[1:]))
    rhs = params.lambda_d + float(
        np.sum(d * (params.eta + params.mu * (1 - params.p) + (ell - 1) * params.mu * params.p))
    )
    out.append(lhs - rhs)
    return np.array(out)


def ba_flow_residual(params: MarketParams, q, state: FluidState) -> np.ndarray:
    """LHS - RHS of the Best-Accept flow equations.

    Order: rider balance ``l = 1..U``, waiting-rider balance, accepted-state
    balance ``l = 2..U``, driver balance. Accepted drivers are taken equal to
    accepted riders.
    """
    q = _profile(q)
    _check_dims(q, state, True)
    u = len(q) - 1
    beta, total = _rates(params)
    mu_p = params.mu * params.p
    out = _rider_block(params, q, state)
    r = [state.r0] + list(state.r) + [0.0]
    a = [0.0, 0.0] + list(state.a) + [0.0]  # a[l] = A_l
    for ell in range(2, u + 1):
        lhs = a[ell] * (params.eta + (ell - 1) * total)
        rhs = mu_p * r[ell] + ell * a[ell + 1] * beta + mu_p * sum(a[i] + r[i] for i in range(ell + 1, u + 1))
        out.append(lhs - rhs)
    ell = np.arange(1, u + 1)
    d = np.asarray(state.d)
    lhs = state.d0 * params.eta_idle + state.r0 * float(np.sum(ell * q[1:]))
    rhs = params.lambda_d + float(np.sum(d * (params.eta + params.mu * (1 - params.p) + (ell - 1) * mu_p)))
    rhs += sum(a[k] * (params.eta + (k - 1) * mu_p) for k in range(2, u + 1))
    out.append(lhs - rhs)
    return np.array(out)


def flow_residual(protocol, params: MarketParams, q, state: FluidState) -> np.ndarray:
    protocol = Protocol.parse(protocol)
    if protocol.kind == "FA":
        return fa_flow_residual(params, q, state)
    if protocol.kind == "BA":
        return ba_flow_residual(params, q, state)
    raise ValueError(f"the fluid model covers FA and BA only, not {protocol}")


def coupling_residual(protocol, state: FluidState) -> np.ndarray:
    """Deviation of the driver masses from their rider-side couplings."""
    protocol = Protocol.parse(protocol)
    u = state.cap_u
    r = np.asarray(state.r)
    if protocol.kind == "FA":
        expected = np.arange(1, u + 1) * r
    else:
        a = np.concatenate([[0.0], np.asarray(state.a), [0.0]])  # a[i-1] = A_i
        expected = np.array([r[i - 1 :].sum() + a[i:].sum() for i in range(1, u + 1)])
    return np.asarray(state.d) - expected


def aggregate_residual(protocol, params: MarketParams, state: FluidState) -> np.ndarray:
    """Arrival-equals-exit identities for riders and drivers.

    Riders: ``lambda = eta * (all rider mass) + match rate``. Drivers:
    ``lambda_d = idle churn + notified churn + match rate``.
    """
    protocol = Protocol.parse(protocol)
    beta, _ = _rates(params)
    mu_p = params.mu * params.p
    r = np.asarray(state.r)
    d = np.asarray(state.d)
    a = np.asarray(state.a)
    if protocol.kind == "FA":
        match = mu_p * float(np.sum(np.arange(1, len(r) + 1) * r))
        rider_mass = state.r0 + r.sum()
    else:
        a2 = a[0] if a.size else 0.0
        match = mu_p * float(r.sum() + a.sum()) + beta * a2
        rider_mass = state.r0 + r.sum() + a.sum()
    riders = params.lambda_r - (params.eta * rider_mass + match)
    drivers = params.lambda_d - (state.d0 * params.eta_idle + params.eta_notified * d.sum() + match)
    return np.array([riders, drivers])


def solve_flow_linear(protocol, params: MarketParams, q) -> FluidState:
    """Solve the flow equations directly as a dense linear system.

    Unknowns are the rider masses, the accepted masses (BA) and ``D_0``; the
    notified-driver masses are substituted through the couplings.
    """
    protocol = Protocol.parse(protocol)
    qa = _profile(q)
    u = len(qa) - 1
    n_a = u - 1 if protocol.kind == "BA" else 0
    n = (u + 1) + n_a + 1

    def state_of(x):
        r = np.asarray(x[1 : u + 1])
        a = np.asarray(x[u + 1 : u + 1 + n_a])
        s = FluidState(float(x[0]), tuple(r), tuple(a), float(x[-1]), (0.0,) * u)
        d = coupling_residual(protocol, s) * -1.0  # expected coupling when d = 0
        return FluidState(s.r0, s.r, s.a, s.d0, tuple(d))

    c = flow_residual(protocol, params, qa, state_of(np.zeros(n)))
    jac = np.empty((len(c), n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1.0
        jac[:, k] = flow_residual(protocol, params, qa, state_of(e)) - c
    if jac.shape[0] != n:
        raise DegenerateModel(f"flow system is {jac.shape[0]}x{n}, not square")
    lu, piv = scipy.linalg.lu_factor(jac)
    if np.min(np.abs(np.diag(lu))) < 1e-12 * max(1.0, np.abs(jac).max()):
        raise DegenerateModel("singular flow-balance system")
    x = scipy.linalg.lu_solve((lu, piv), -c)
    return state_of(x)


# --- absorbing chain -----------------------------------------------------


@dataclass(frozen=True)
class AbsorptionModel:
    """Transient generator ``M`` and absorption rates ``Q`` (renege, match).

    ``state_index`` names the transient states in row order: FA
    ``R0, R1, ..., RU``; BA additionally ``AU, ..., A2``.
    """

    m: np.ndarray
    q: np.ndarray
    state_index: tuple[str, ...]

    @property
    def dim(self) -> int:
        return self.m.shape[0]


@dataclass(frozen=True)
class AbsorptionMetrics:
    match_prob: np.ndarray
    renege_prob: np.ndarray
    cond_match_time: np.ndarray  # NaN where matching is impossible
    expected_time: np.ndarray

    def to_dict(self) -> dict:
        def clean(v):
            return [None if not np.isfinite(x) else float(x) for x in v]

        return {
            "match_prob": clean(self.match_prob),
            "renege_prob": clean(self.renege_prob),
            "cond_match_time": clean(self.cond_match_time),
        }


def build_generator(protocol, params: MarketParams, q) -> AbsorptionModel:
    """Rate matrices of one rider's lifecycle until it reneges or matches."""
    protocol = Protocol.parse(protocol)
    qa = _profile(q)
    u = len(qa) - 1
    beta, _ = _rates(params)
    mu_p = params.mu * params.p
    eta = params.eta
    if protocol.kind == "FA":
        names = tuple(f"R{i}" for i in range(u + 1))
    elif protocol.kind == "BA":
        names = tuple(f"R{i}" for i in range(u + 1)) + tuple(f"A{l}" for l in range(u, 1, -1))
    else:
        raise ValueError(f"the fluid model covers FA and BA only, not {protocol}")
    idx = {name: i for i, name in enumerate(names)}
    dim = len(names)
    m = np.zeros((dim, dim))
    absorb = np.zeros((dim, 2))
    absorb[:, 0] = eta

    for i in range(1, u + 1):
        m[idx["R0"], idx[f"R{i}"]] = qa[i]
        m[idx[f"R{i}"], idx[f"R{i - 1}"]] += i * beta
        absorb[idx[f"R{i}"], 1] = (i if protocol.kind == "FA" else 1) * mu_p
        if protocol.kind == "BA":
            for j in range(2, i + 1):
                m[idx[f"R{i}"], idx[f"A{j}"]] += mu_p
    if protocol.kind == "BA":
        for ell in range(3, u + 1):
            m[idx[f"A{ell}"], idx[f"A{ell - 1}"]] += (ell - 1) * beta
            for j in range(2, ell):
                m[idx[f"A{ell}"], idx[f"A{j}"]] += mu_p
            absorb[idx[f"A{ell}"], 1] = mu_p
        if u >= 2:
            absorb[idx["A2"], 1] = mu_p + beta
    np.fill_diagonal(m, 0.0)
    m[np.diag_indices(dim)] = -(m.sum(axis=1) + absorb.sum(axis=1))
    return AbsorptionModel(m, absorb, names)


def absorption_metrics(model: AbsorptionModel) -> AbsorptionMetrics:
    """Absorption probabilities and conditional match times per start state.

    With ``N = -M^{-1}``: ``P = N Q`` and the mean time to a match given
    that the rider matches is ``(N^2 Q)_{i,match} / (N Q)_{i,match}``.
    """
    m = model.m
    lu, piv = scipy.linalg.lu_factor(-m)
    if np.min(np.abs(np.diag(lu))) < 1e-12:
        raise DegenerateModel("no absorption from some state: singular transient generator")
    nq = scipy.linalg.lu_solve((lu, piv), model.q)
    n2q = scipy.linalg.lu_solve((lu, piv), nq)
    ones = scipy.linalg.lu_solve((lu, piv), np.ones(m.shape[0]))
    match = nq[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(match > 0, n2q[:, 1] / np.where(match > 0, match, 1.0), np.nan)
    return AbsorptionMetrics(match, nq[:, 0], cond, ones)


def simulate_absorption(model: AbsorptionModel, start: int, n_paths: int, seed: int):
    """Trajectory oracle: simulate ``n_paths`` lifecycles from ``start``.

    Returns ``(matched, times)`` arrays: a boolean per path and its
    absorption time.
    """
    rng = np.random.default_rng(seed)
    dim = model.dim
    out_rates = np.concatenate([np.where(np.eye(dim, dtype=bool), 0.0, model.m), model.q], axis=1)
    totals = out_rates.sum(axis=1)
    if np.any(totals <= 0):
        raise DegenerateModel("some transient state has no outflow")
    cum = np.cumsum(out_rates / totals[:, None], axis=1)
    cum[:, -1] = 1.0
    state = np.full(n_paths, start, dtype=np.int64)
    time = np.zeros(n_paths)
    alive = np.ones(n_paths, dtype=bool)
    matched = np.zeros(n_paths, dtype=bool)
    while alive.any():
        ids = np.flatnonzero(alive)
        s = state[ids]
        time[ids] += rng.exponential(1.0, size=ids.size) / totals[s]
        u = rng.random(ids.size)
        nxt = (u[:, None] > cum[s]).sum(axis=1)
        done = nxt >= dim
        matched[ids[done]] = nxt[done] == dim + 1
        alive[ids[done]] = False
        state[ids[~done]] = nxt[~done]
    return matched, time
