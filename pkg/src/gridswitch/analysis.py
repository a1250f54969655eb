"""Equilibria, security, energy monitoring and overshoot metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import (
    MissingEquilibrium,
    NoEquilibriumFound,
    NonzeroFrequencyRequired,
    StorageSearchFailed,
    UnsupportedVariant,
)
from .network import ContinuousState, Network
from .solver import KIND_NONE, ClosedLoop, HybridState, Trajectory
from .supply import StorageFunction, derive_storage

HZ_PER_RAD_S = 1.0 / (2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class EquilibriumPoint:
    eta_star: np.ndarray
    omega_star: np.ndarray
    x_s_star: tuple[np.ndarray, ...]
    s_star: np.ndarray
    p_star: np.ndarray
    residual: float
    network: Optional[Network] = field(default=None, repr=False)

    def flatten(self) -> np.ndarray:
        return ContinuousState(self.eta_star, self.omega_star, self.x_s_star).flatten()


def _integrator_buses(loop: ClosedLoop) -> list[int]:
    return [j for j, s in enumerate(loop.supplies) if s.restores_frequency]


def equilibrium_supply(
    loop: ClosedLoop, segment: int = 0, participation: Optional[Sequence[float]] = None
) -> np.ndarray:
    """Steady-state supply of every bus with the imbalance shared by integrator buses."""
    integ = _integrator_buses(loop)
    if not integ:
        raise NonzeroFrequencyRequired("no bus has integral action; frequency cannot be restored")
    p_load = loop.p_load(segment)
    s = np.array([0.0 if j in integ else loop.supplies[j].rest_output() for j in range(loop.n)])
    w = np.ones(loop.n) if participation is None else np.asarray(participation, dtype=float)
    if w.shape != (loop.n,):
        raise ValueError(f"participation needs {loop.n} weights")
    wi = w[integ]
    if np.any(wi < 0) or wi.sum() <= 0:
        raise ValueError("participation weights of integrator buses must be >= 0 with a positive sum")
    imbalance = p_load.sum() - s.sum()
    s[integ] = imbalance * wi / wi.sum()
    return s


def _newton(inc_r, inc, b, xi, target, theta0, tol, max_iter=60):
    theta = theta0.copy()

    def resid(th):
        eta = inc.T @ np.concatenate([[0.0], th]) + xi
        return inc_r @ (b * np.sin(eta)) - target, eta

    r, eta = resid(theta)
    nr = np.abs(r).max(initial=0.0)
    for _ in range(max_iter):
        if nr <= tol:
            return theta, eta, nr
        J = inc_r @ (np.diag(b * np.cos(eta)) @ inc_r.T)
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        lam = 1.0
        while lam > 1e-6:
            cand = theta + lam * step
            r_new, eta_new = resid(cand)
            n_new = np.abs(r_new).max(initial=0.0)
            if n_new < (1 - 1e-4 * lam) * nr:
                break
            lam *= 0.5
        else:
            return theta, eta, nr
        theta, r, eta, nr = cand, r_new, eta_new, n_new
    return theta, eta, nr


def solve_equilibrium(
    loop: ClosedLoop,
    segment: int = 0,
    participation: Optional[Sequence[float]] = None,
    eta_ref: Optional[np.ndarray] = None,
    n_starts: int = 16,
    seed: int = 0,
    tol: float = 1e-12,
) -> EquilibriumPoint:
    """Zero-frequency equilibrium with balanced power at every bus.

    Newton iteration on bus phases (bus 0 as reference) from several
    starting points. Angle differences keep the loop component of
    ``eta_ref``, which the dynamics conserve. Among converged points the
    secure one with the smallest largest angle is returned.
    """
    net = loop.network
    s_star = equilibrium_supply(loop, segment, participation)
    target_full = s_star - loop.p_load(segment)
    inc = net.incidence
    b = net.susceptances
    m, n = loop.m, loop.n
    xi = np.zeros(m)
    if eta_ref is not None and m:
        basis = net.cycle_basis
        if basis.size:
            xi = basis @ (basis.T @ np.asarray(eta_ref, dtype=float))
    scale = max(1.0, np.abs(target_full).max(initial=0.0))

    if n == 1:
        eta = np.zeros(0)
        res = abs(target_full[0])
        if res > 1e-10 * scale:
            raise NoEquilibriumFound(f"single bus cannot balance {target_full[0]:.6g}")
        candidates = [(eta, res)]
    else:
        inc_r = inc[1:]
        target = target_full[1:]
        rng = np.random.default_rng(seed)
        starts = [np.zeros(n - 1)] + [rng.uniform(-np.pi, np.pi, n - 1) for _ in range(n_starts - 1)]
        candidates = []
        for th0 in starts:
            _, eta, res = _newton(inc_r, inc, b, xi, target, th0, tol * scale)
            if res <= 1e-10 * scale:
                candidates.append((eta, res))
        if not candidates:
            raise NoEquilibriumFound("power-flow equations have no solution from any starting point")

    def rank(c):
        eta = c[0]
        worst = np.abs(eta).max(initial=0.0)
        return (0 if worst < np.pi / 2 else 1, round(worst, 12))

    eta, _ = min(candidates, key=rank)
    eta = np.asarray(eta, dtype=float)
    x_s = tuple(loop.supplies[j].rest_state(s_star[j]) if loop.supplies[j].order else np.zeros(0) for j in range(n))
    point = EquilibriumPoint(eta, np.zeros(n), x_s, s_star, b * np.sin(eta), 0.0, net)
    st = np.zeros(n, dtype=np.int64)
    kind = loop.load_arrays[0]
    residual = float(np.abs(loop.vector_field(point.flatten(), st, kind, segment)).max(initial=0.0))
    return EquilibriumPoint(eta, np.zeros(n), x_s, s_star, b * np.sin(eta), residual, net)


def security_check(eq: EquilibriumPoint) -> np.ndarray:
    """Per-line verdict: True where the equilibrium angle is strictly inside (-pi/2, pi/2)."""
    return np.abs(np.asarray(eq.eta_star, dtype=float)) < np.pi / 2


# --- energy monitoring -------------------------------------------------------------

@dataclass(frozen=True)
class LyapunovValue:
    v_f: float
    v_p: float
    v_s: Optional[tuple[float, ...]]
    total: float


def potential_energy(b: np.ndarray, eta: np.ndarray, eta_star: np.ndarray) -> np.ndarray:
    """Line energy relative to the equilibrium; works on stacked angle rows."""
    return np.sum(b * ((np.cos(eta_star) - np.cos(eta)) - np.sin(eta_star) * (eta - eta_star)), axis=-1)


def lyapunov_value(
    state: Union[HybridState, ContinuousState],
    eq: Optional[EquilibriumPoint],
    storages: Optional[Sequence[Optional[StorageFunction]]] = None,
) -> LyapunovValue:
    if eq is None or eq.network is None:
        raise MissingEquilibrium("an equilibrium with its network is required")
    cs = state.continuous if isinstance(state, HybridState) else state
    net = eq.network
    omega = np.asarray(cs.omega, dtype=float)
    v_f = 0.5 * float(np.sum(net.inertias * omega**2))
    v_p = float(potential_energy(net.susceptances, np.asarray(cs.eta, float), eq.eta_star))
    v_s = None
    if storages is not None:
        v_s = tuple(
            float(sf.with_shift(eq.x_s_star[j]).value(cs.x_s[j])) if sf is not None else 0.0
            for j, sf in enumerate(storages)
        )
    total = v_f + v_p + (sum(v_s) if v_s else 0.0)
    return LyapunovValue(v_f, v_p, v_s, total)


def derive_storages(loop: ClosedLoop, epsilon: float = 0.0) -> list[Optional[StorageFunction]]:
    """Storage per bus, or None where the search fails or the model is nonlinear."""
    out = []
    for model in loop.supplies:
        try:
            out.append(derive_storage(model, epsilon))
        except (StorageSearchFailed, UnsupportedVariant):
            out.append(None)
    return out


def segment_equilibria(
    traj: Trajectory, participation: Optional[Sequence[float]] = None
) -> list[EquilibriumPoint]:
    """One equilibrium per constant-load segment, sharing the trajectory's loop component."""
    loop = traj.loop
    n_seg = len(loop.segment_times) + 1
    eta_ref = traj.eta[0] if len(traj) else None
    return [solve_equilibrium(loop, k, participation, eta_ref) for k in range(n_seg)]


@dataclass(frozen=True, eq=False)
class LyapunovTrace:
    v_f: np.ndarray
    v_p: np.ndarray
    v_s: Optional[np.ndarray]
    total: np.ndarray


def lyapunov_trace(
    traj: Trajectory,
    equilibria: Sequence[EquilibriumPoint],
    storages: Optional[Sequence[Optional[StorageFunction]]] = None,
) -> LyapunovTrace:
    """Energy function at every sample, using the equilibrium of each sample's segment."""
    loop = traj.loop
    net = loop.network
    seg = traj.segment
    eta_star = np.array([eq.eta_star for eq in equilibria]).reshape(len(equilibria), loop.m)[seg]
    v_f = 0.5 * np.sum(net.inertias * traj.omega**2, axis=1)
    v_p = potential_energy(net.susceptances, traj.eta, eta_star)
    total = v_f + v_p
    v_s = None
    if storages is not None:
        v_s = np.zeros((len(traj), loop.n))
        for j, sf in enumerate(storages):
            if sf is None or loop.orders[j] == 0:
                continue
            xs_star = np.array([eq.x_s_star[j] for eq in equilibria])[seg]
            dx = traj.supply_state(j) - xs_star
            v_s[:, j] = np.einsum("ki,ij,kj->k", dx, sf.P, dx)
        total = total + v_s.sum(axis=1)
    return LyapunovTrace(v_f, v_p, v_s, total)


@dataclass(frozen=True)
class DissipationReport:
    mode: str
    max_flow_increase: float
    max_jump_increase: float
    n_flow_violations: int
    n_jump_violations: int
    worst_time: Optional[float]

    @property
    def passed(self) -> bool:
        return self.n_flow_violations == 0 and self.n_jump_violations == 0


def verify_dissipation(
    traj: Trajectory,
    equilibria: Optional[Sequence[EquilibriumPoint]] = None,
    storages: Optional[Sequence[Optional[StorageFunction]]] = None,
    abs_tol: float = 1e-8,
    rel_tol: float = 1e-6,
) -> DissipationReport:
    """Check that the energy function never grows along flow and is unchanged by jumps.

    With a storage for every stateful bus the full energy function is
    monitored. Otherwise only the network part is monitored, against the
    supply rate integrated by the trapezoid rule. Steps that straddle a
    load disturbance are skipped since the reference equilibrium changes.
    """
    if equilibria is None:
        equilibria = segment_equilibria(traj)
    loop = traj.loop
    full = storages is not None and all(
        sf is not None or loop.orders[j] == 0 for j, sf in enumerate(storages)
    )
    trace = lyapunov_trace(traj, equilibria, storages if full else None)
    V = trace.total
    t, ell, seg = traj.t, traj.ell, traj.segment
    same_seg = seg[1:] == seg[:-1]
    flow = same_seg & (ell[1:] == ell[:-1]) & (t[1:] > t[:-1])
    jump = same_seg & (ell[1:] == ell[:-1] + 1)
    dV = np.diff(V)
    h = np.diff(t)
    if full:
        mode = "storage"
        budget = np.zeros_like(dV)
    else:
        mode = "supply-rate"
        s_star = np.array([eq.s_star for eq in equilibria])[seg]
        net_rate = traj.omega * (traj.supply_output - s_star)
        rate_lo = np.sum(net_rate - traj.omega * traj.demand, axis=1)[:-1]
        # the demand is held over a step, so the right end uses the left discrete state
        d_hi = traj.demand_for(traj.st[:-1], traj.unloaded_power[1:])
        rate_hi = np.sum(net_rate[1:] - traj.omega[1:] * d_hi, axis=1)
        budget = 0.5 * h * (rate_lo + rate_hi)
    excess = dV - budget
    tol = abs_tol + rel_tol * h
    fl = np.where(flow, excess, -np.inf)
    jp = np.where(jump, dV, -np.inf)
    flow_viol = flow & (excess > tol)
    jump_viol = jump & (dV != 0.0)
    worst = None
    if flow_viol.any():
        worst = float(t[1:][flow_viol][np.argmax(excess[flow_viol])])
    return DissipationReport(
        mode,
        float(max(fl.max(initial=-np.inf), 0.0)),
        float(max(jp.max(initial=-np.inf), 0.0)),
        int(flow_viol.sum()),
        int(jump_viol.sum()),
        worst,
    )


# --- performance metrics ---------------------------------------------------------

@dataclass(frozen=True)
class BusMetrics:
    bus: int
    peak_abs_omega: float
    peak_abs_freq_hz: float
    settling_time: float
    loads_off_time: Optional[float]
    switch_count: int


def overshoot_metrics(traj: Trajectory, band: float = 1e-3) -> dict[int, BusMetrics]:
    """Peak deviation, settling time into ``|omega| <= band`` and last load release per bus.

    Settling time is the first time after which the deviation stays in the
    band (infinite if the final sample is outside). The release time is the
    time of the last transition that left the bus with zero controllable
    demand, or None for buses without controllable load.
    """
    out = {}
    t = traj.t
    for j, bus in enumerate(traj.loop.network.buses):
        w = np.abs(traj.omega[:, j])
        peak = float(w.max(initial=0.0))
        outside = np.nonzero(w > band)[0]
        if outside.size == 0:
            settle = 0.0
        elif outside[-1] == len(t) - 1:
            settle = float("inf")
        else:
            settle = float(t[outside[-1] + 1])
        off_time, count = None, 0
        if traj.kind[j] != KIND_NONE:
            off_time = 0.0
            code = traj.st[:, j]
            change = np.nonzero(code[1:] != code[:-1])[0] + 1
            count = int(change.size)
            to_zero = change[code[change] == 0]
            if to_zero.size:
                off_time = float(t[to_zero[-1]])
            if code[-1] != 0:
                off_time = float("inf")
        out[bus.id] = BusMetrics(bus.id, peak, peak * HZ_PER_RAD_S, settle, off_time, count)
    return out
