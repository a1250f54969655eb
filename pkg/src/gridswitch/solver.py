"""Closed-loop integration with event localization.

The continuous part is a fixed-step classical Runge-Kutta scheme with the
controllable demand held constant between events. Threshold crossings are
detected after each step and located by bisection on the step length, so
every discrete transition happens at a state within ``event_tol`` of its
threshold. The step loop for linear supply models runs in a compiled kernel;
nonlinear plug-ins go through an equivalent Python loop.

Per-bus discrete state codes (array ``st``):

* hysteretic loads: the relay state sigma in {-1, 0, 1};
* switching loads: the branch -1 / 0 / +1 of the on-off map, or +2 / -2 while
  sliding on the upper / lower threshold under equivalent control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit

from .errors import (
    InsufficientSwitches,
    InvalidInitialSigma,
    MaxBisectionsExceeded,
    ModelError,
    NoSignChange,
    NonPositiveParameter,
    NotAttracting,
    NumericalBlowup,
    StepRejected,
)
from .loads import HystereticLoad, SwitchingLoad, hysteresis_flow_set
from .network import ContinuousState, Network
from .supply import SupplyModel, as_linear

KIND_NONE, KIND_SWITCHING, KIND_STRICT, KIND_HYSTERESIS = 0, 1, 2, 3
_DONE, _EVENT, _BLOWUP, _FULL, _EVFULL = 0, 1, 2, 3, 4
_NO_GUARD = -1e300

EVENT_KINDS = ("jump-on", "jump-off", "filippov-cross", "sliding-enter", "sliding-exit")


# --- compiled kernels ----------------------------------------------------------

@njit(cache=True)
def _rhs(x, L, Gw, b, c, mask, m, n, out):
    nx = x.shape[0]
    for i in range(nx):
        acc = c[i]
        for k in range(nx):
            acc += L[i, k] * x[k]
        out[i] = acc
    for e in range(m):
        p = b[e] * math.sin(x[e])
        for j in range(n):
            out[m + j] += Gw[j, e] * p
    for i in range(nx):
        out[i] *= mask[i]


@njit(cache=True)
def _rk4(x, h, L, Gw, b, c, mask, m, n, work, out):
    nx = x.shape[0]
    k1, k2, k3, k4, tmp = work[0], work[1], work[2], work[3], work[4]
    _rhs(x, L, Gw, b, c, mask, m, n, k1)
    for i in range(nx):
        tmp[i] = x[i] + 0.5 * h * k1[i]
    _rhs(tmp, L, Gw, b, c, mask, m, n, k2)
    for i in range(nx):
        tmp[i] = x[i] + 0.5 * h * k2[i]
    _rhs(tmp, L, Gw, b, c, mask, m, n, k3)
    for i in range(nx):
        tmp[i] = x[i] + h * k3[i]
    _rhs(tmp, L, Gw, b, c, mask, m, n, k4)
    for i in range(nx):
        out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@njit(cache=True)
def _forcing(st, kind, q1, q2, inv_m, cbase, m, n, c, mask):
    """Constant part of the vector field for the current discrete state."""
    for i in range(c.shape[0]):
        c[i] = cbase[i]
        mask[i] = 1.0
    for j in range(n):
        k = kind[j]
        d = 0.0
        if k == 3:
            d = q1[j] * st[j]
        elif k == 1 or k == 2:
            if st[j] == 1:
                d = q1[j]
            elif st[j] == -1:
                d = q2[j]
            elif st[j] == 2 or st[j] == -2:
                mask[m + j] = 0.0
        c[m + j] -= d * inv_m[j]


@njit(cache=True)
def _unloaded_power(x, j, L, Gw, b, cbase, Mv, m):
    """Inertia times frequency derivative of bus j with its controllable demand removed."""
    nx = x.shape[0]
    acc = cbase[m + j]
    for k in range(nx):
        acc += L[m + j, k] * x[k]
    for e in range(m):
        acc += Gw[j, e] * b[e] * math.sin(x[e])
    return Mv[j] * acc


@njit(cache=True)
def _guards(x, st, kind, p1, p2, q1, q2, L, Gw, b, cbase, Mv, m, n, g):
    """Guard values; a hysteretic guard fires at g >= 0, a switching guard at g > 0."""
    fired = False
    for j in range(n):
        k = kind[j]
        w = x[m + j]
        s = st[j]
        val = _NO_GUARD
        if k == 3:
            if s == 0:
                val = abs(w) - p1[j]
            else:
                val = p2[j] - s * w
            if val >= 0.0:
                fired = True
        elif k == 1:
            if s == 0:
                val = max(w - p1[j], p2[j] - w)
            elif s == 1:
                val = p1[j] - w
            elif s == -1:
                val = w - p2[j]
            else:
                v = _unloaded_power(x, j, L, Gw, b, cbase, Mv, m)
                if s == 2:
                    val = max(-v, v - q1[j])
                else:
                    val = max(v, q2[j] - v)
            if val > 0.0:
                fired = True
        g[j] = val
    return fired


@njit(cache=True)
def _branch(w, up, down):
    if w > up:
        return 1
    if w > down:
        return 0
    return -1


@njit(cache=True)
def _advance(x, t, kgrid, t_stop, dt, L, Gw, b, cbase, m, n, kind, p1, p2, q1, q2, Mv, inv_m, st,
             eta_max, norm_max, buf_t, buf_x, buf_st, pos, ev_t, ev_bus, ev_new, ev_pos, xnew):
    """Step until ``t_stop``, a guard firing, blowup, or a full buffer.

    On a guard firing the step is not accepted; ``x`` stays at the step start
    and the attempted step length is returned.
    """
    nx = x.shape[0]
    c = np.empty(nx)
    mask = np.empty(nx)
    work = np.empty((5, nx))
    g = np.empty(n)
    _forcing(st, kind, q1, q2, inv_m, cbase, m, n, c, mask)
    scale = 1e-12 * max(1.0, abs(t_stop))
    while True:
        while (kgrid + 1) * dt <= t + scale:
            kgrid += 1
        if t >= t_stop - scale:
            return _DONE, t, kgrid, pos, ev_pos, 0.0
        changed = False
        for j in range(n):
            if kind[j] == 2:
                r = _branch(x[m + j], p1[j], p2[j])
                if r != st[j]:
                    if ev_pos >= ev_t.shape[0]:
                        return _EVFULL, t, kgrid, pos, ev_pos, 0.0
                    ev_t[ev_pos] = t
                    ev_bus[ev_pos] = j
                    ev_new[ev_pos] = r
                    ev_pos += 1
                    st[j] = r
                    changed = True
        if changed:
            _forcing(st, kind, q1, q2, inv_m, cbase, m, n, c, mask)
        if pos >= buf_t.shape[0]:
            return _FULL, t, kgrid, pos, ev_pos, 0.0
        tgt = (kgrid + 1) * dt
        on_grid = True
        if tgt >= t_stop - scale:
            on_grid = abs(tgt - t_stop) <= scale
            tgt = t_stop
        h = tgt - t
        _rk4(x, h, L, Gw, b, c, mask, m, n, work, xnew)
        if _guards(xnew, st, kind, p1, p2, q1, q2, L, Gw, b, cbase, Mv, m, n, g):
            return _EVENT, t, kgrid, pos, ev_pos, h
        for i in range(nx):
            x[i] = xnew[i]
        t = tgt
        if on_grid:
            kgrid += 1
        buf_t[pos] = t
        for i in range(nx):
            buf_x[pos, i] = x[i]
        for j in range(n):
            buf_st[pos, j] = st[j]
        pos += 1
        norm = 0.0
        blow = False
        for i in range(nx):
            norm += x[i] * x[i]
            if i < m and abs(x[i]) > eta_max:
                blow = True
        if blow or math.sqrt(norm) > norm_max or not math.isfinite(norm):
            return _BLOWUP, t, kgrid, pos, ev_pos, 0.0


# --- model assembly ------------------------------------------------------------

@dataclass(frozen=True)
class Disturbance:
    """Step change of the uncontrollable load at one bus."""

    bus: int
    time: float
    magnitude: float

    def __post_init__(self):
        if not (self.time >= 0 and np.isfinite(self.time)):
            raise NonPositiveParameter(f"disturbance time must be >= 0, got {self.time}")


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1e-3
    event_tol: float = 1e-9
    t_end: float = 60.0
    mode: str = "auto"
    sliding: str = "equivalent-control"
    chatter_window: float = 1.0
    chatter_count: int = 50
    eta_max: float = math.pi - 0.01
    norm_max: float = 1e6
    max_bisections: int = 200

    def __post_init__(self):
        for name in ("dt", "event_tol", "t_end", "chatter_window"):
            if not getattr(self, name) > 0:
                raise NonPositiveParameter(f"{name} must be > 0, got {getattr(self, name)}")
        if self.mode not in ("auto", "filippov", "hybrid"):
            raise ModelError(f"unknown mode {self.mode!r}")
        if self.sliding not in ("equivalent-control", "strict-event"):
            raise ModelError(f"unknown sliding treatment {self.sliding!r}")


@dataclass(eq=False)
class ClosedLoop:
    """Network with its per-bus supplies and controllable loads, ready to integrate.

    Supplies and loads are read from the buses; transfer functions are
    realized in state-space form.
    """

    network: Network
    disturbances: tuple[Disturbance, ...] = ()

    def __post_init__(self):
        self.disturbances = tuple(sorted(self.disturbances, key=lambda d: d.time))
        for bus in self.network.buses:
            if bus.supply is None:
                raise ModelError(f"bus {bus.id} has no supply model")
            if bus.load is not None and not isinstance(bus.load, (SwitchingLoad, HystereticLoad)):
                raise ModelError(f"bus {bus.id}: unsupported load type {type(bus.load).__name__}")
        for d in self.disturbances:
            if d.bus not in self.network.index:
                raise ModelError(f"disturbance references unknown bus {d.bus}")

    @property
    def n(self) -> int:
        return self.network.n_buses

    @property
    def m(self) -> int:
        return self.network.n_lines

    @cached_property
    def supplies(self) -> tuple[SupplyModel, ...]:
        return tuple(as_linear(b.supply) for b in self.network.buses)

    @property
    def loads(self) -> tuple:
        return tuple(b.load for b in self.network.buses)

    @cached_property
    def orders(self) -> tuple[int, ...]:
        return tuple(s.order for s in self.supplies)

    @cached_property
    def offsets(self) -> tuple[int, ...]:
        """Start index of each bus's supply state in the flat state vector."""
        out, k = [], self.m + self.n
        for o in self.orders:
            out.append(k)
            k += o
        return tuple(out)

    @property
    def nx(self) -> int:
        return self.m + self.n + sum(self.orders)

    @cached_property
    def is_linear(self) -> bool:
        return all(s.is_linear for s in self.supplies)

    @cached_property
    def linear_part(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(L, Gw, b)``: the vector field is ``L x + [0; Gw (b sin eta); 0] + c``.

        Nonlinear supply blocks are left out of ``L`` and added separately.
        """
        m, n, nx = self.m, self.n, self.nx
        net = self.network
        inv_m = 1.0 / net.inertias
        L = np.zeros((nx, nx))
        L[:m, m:m + n] = net.incidence.T
        for j, (model, off) in enumerate(zip(self.supplies, self.offsets)):
            if not model.is_linear:
                continue
            A, B, C, D = model.state_space()
            o = model.order
            w = m + j
            # input u = -omega
            L[w, w] -= D * inv_m[j]
            if o:
                L[w, off:off + o] += C * inv_m[j]
                L[off:off + o, off:off + o] = A
                L[off:off + o, w] = -B
        Gw = -inv_m[:, None] * net.incidence
        return L, Gw, net.susceptances.copy()

    @cached_property
    def load_arrays(self) -> tuple[np.ndarray, ...]:
        """``(kind, p1, p2, q1, q2)`` per bus, with the strict flag left to the caller."""
        n = self.n
        kind = np.zeros(n, dtype=np.int64)
        p1, p2, q1, q2 = (np.zeros(n) for _ in range(4))
        for j, load in enumerate(self.loads):
            if isinstance(load, SwitchingLoad):
                kind[j] = KIND_SWITCHING
                p1[j], p2[j], q1[j], q2[j] = load.omega_up, load.omega_down, load.d_up, load.d_down
            elif isinstance(load, HystereticLoad):
                kind[j] = KIND_HYSTERESIS
                p1[j], p2[j], q1[j], q2[j] = load.omega1, load.omega0, load.d_up, -load.d_up
        return kind, p1, p2, q1, q2

    @cached_property
    def segment_times(self) -> tuple[float, ...]:
        """Start times of the constant-load segments after the first."""
        return tuple(sorted({d.time for d in self.disturbances if d.time > 0}))

    def p_load(self, segment: int = 0) -> np.ndarray:
        """Uncontrollable load on each bus during a segment (segment 0 starts at t=0)."""
        p = self.network.base_loads.copy()
        cut = self.segment_times[segment - 1] if segment > 0 else 0.0
        for d in self.disturbances:
            if d.time <= cut:
                p[self.network.index[d.bus]] += d.magnitude
        return p

    def cbase(self, segment: int = 0) -> np.ndarray:
        c = np.zeros(self.nx)
        c[self.m:self.m + self.n] = -self.p_load(segment) / self.network.inertias
        return c

    def flatten(self, state: ContinuousState) -> np.ndarray:
        x = state.flatten()
        if x.shape != (self.nx,):
            raise ModelError(f"state has {x.size} entries, closed loop needs {self.nx}")
        return x

    def unflatten(self, x: np.ndarray) -> ContinuousState:
        return ContinuousState.unflatten(np.asarray(x, float), self.m, self.orders)

    def nonlinear_term(self, x: np.ndarray) -> np.ndarray:
        """Contribution of nonlinear supply plug-ins to the vector field."""
        out = np.zeros(self.nx)
        for j, (model, off) in enumerate(zip(self.supplies, self.offsets)):
            if model.is_linear:
                continue
            o = model.order
            dx, s = model.flow(x[off:off + o], x[self.m + j])
            out[off:off + o] = dx
            out[self.m + j] += s / self.network.inertias[j]
        return out

    def supply_output(self, X: np.ndarray) -> np.ndarray:
        """Net supply of every bus for a stack of flat states (K, nx) -> (K, n)."""
        X = np.atleast_2d(X)
        S = np.zeros((X.shape[0], self.n))
        for j, (model, off) in enumerate(zip(self.supplies, self.offsets)):
            w = X[:, self.m + j]
            xs = X[:, off:off + model.order]
            if model.is_linear:
                _, _, C, D = model.state_space()
                S[:, j] = (xs @ C if model.order else 0.0) - D * w
            else:
                S[:, j] = [model.flow(xs[k], w[k])[1] for k in range(X.shape[0])]
        return S

    def vector_field(self, x: np.ndarray, st: np.ndarray, kind: np.ndarray, segment: int = 0) -> np.ndarray:
        """Full vector field at one state with demand from the discrete state."""
        L, Gw, b = self.linear_part
        _, p1, p2, q1, q2 = self.load_arrays
        c, mask, out = np.empty(self.nx), np.empty(self.nx), np.empty(self.nx)
        _forcing(np.asarray(st, np.int64), kind, q1, q2, 1.0 / self.network.inertias,
                 self.cbase(segment), self.m, self.n, c, mask)
        _rhs(np.asarray(x, float), L, Gw, b, c, mask, self.m, self.n, out)
        if not self.is_linear:
            out += self.nonlinear_term(x) * mask
        return out


# --- states, trajectories, events ----------------------------------------------

@dataclass(frozen=True)
class HybridState:
    t: float
    ell: int
    continuous: ContinuousState
    sigma: np.ndarray
    branch: Optional[np.ndarray] = None


@dataclass(frozen=True)
class Event:
    t: float
    ell: int
    bus: int
    kind: str
    detail: str = ""


@dataclass(eq=False)
class Trajectory:
    """Samples at every accepted step and every event, in hybrid-time order.

    ``st`` holds the per-bus discrete code (see module docstring); ``sigma``
    and ``branch`` are views of it restricted to hysteretic and switching buses.
    """

    loop: ClosedLoop
    config: SolverConfig
    t: np.ndarray
    ell: np.ndarray
    x: np.ndarray
    st: np.ndarray
    segment: np.ndarray
    is_event: np.ndarray
    events: list[Event]
    kind: np.ndarray
    status: str = "complete"

    def __len__(self) -> int:
        return len(self.t)

    @property
    def omega(self) -> np.ndarray:
        return self.x[:, self.loop.m:self.loop.m + self.loop.n]

    @property
    def eta(self) -> np.ndarray:
        return self.x[:, :self.loop.m]

    @property
    def sigma(self) -> np.ndarray:
        return np.where(self.kind == KIND_HYSTERESIS, self.st, 0).astype(np.int8)

    @property
    def branch(self) -> np.ndarray:
        return np.where((self.kind == KIND_SWITCHING) | (self.kind == KIND_STRICT), self.st, 0).astype(np.int8)

    @property
    def sliding(self) -> np.ndarray:
        return np.abs(self.branch) == 2

    def supply_state(self, j: int) -> np.ndarray:
        off = self.loop.offsets[j]
        return self.x[:, off:off + self.loop.orders[j]]

    @cached_property
    def supply_output(self) -> np.ndarray:
        return self.loop.supply_output(self.x)

    @cached_property
    def p_load(self) -> np.ndarray:
        table = np.array([self.loop.p_load(k) for k in range(len(self.loop.segment_times) + 1)])
        return table[self.segment]

    @cached_property
    def unloaded_power(self) -> np.ndarray:
        """``M omega_dot`` with controllable demand removed, per sample and bus."""
        lp = self.loop
        L, Gw, b = lp.linear_part
        w = slice(lp.m, lp.m + lp.n)
        rows = self.x @ L[w].T + (b * np.sin(self.eta)) @ Gw.T - self.p_load / lp.network.inertias
        if not lp.is_linear:
            rows = rows + np.array([lp.nonlinear_term(xk)[w] for xk in self.x])
        return rows * lp.network.inertias

    def demand_for(self, st: np.ndarray, unloaded: np.ndarray) -> np.ndarray:
        """Controllable demand for given discrete codes and unloaded powers (same shape)."""
        _, _, _, q1, q2 = self.loop.load_arrays
        d = np.zeros(st.shape)
        hyst = np.broadcast_to(self.kind == KIND_HYSTERESIS, st.shape)
        sw = np.broadcast_to((self.kind == KIND_SWITCHING) | (self.kind == KIND_STRICT), st.shape)
        q1b, q2b = np.broadcast_to(q1, st.shape), np.broadcast_to(q2, st.shape)
        d[hyst] = (q1b * st)[hyst]
        on, off = sw & (st == 1), sw & (st == -1)
        d[on] = q1b[on]
        d[off] = q2b[off]
        slide = sw & (np.abs(st) == 2)
        d[slide] = unloaded[slide]
        return d

    @cached_property
    def demand(self) -> np.ndarray:
        return self.demand_for(self.st, self.unloaded_power)

    @cached_property
    def omega_dot(self) -> np.ndarray:
        wd = (self.unloaded_power - self.demand) / self.loop.network.inertias
        return np.where(self.sliding, 0.0, wd)

    def state(self, k: int) -> HybridState:
        return HybridState(
            float(self.t[k]), int(self.ell[k]), self.loop.unflatten(self.x[k]),
            self.sigma[k].copy(), self.branch[k].copy(),
        )

    def bus_events(self, j: int, kinds: Sequence[str] = EVENT_KINDS) -> list[Event]:
        bus_id = self.loop.network.buses[j].id
        return [e for e in self.events if e.bus == bus_id and e.kind in kinds]

    def sliding_intervals(self, j: int) -> list[tuple[float, float]]:
        out, start = [], None
        for e in self.bus_events(j, ("sliding-enter", "sliding-exit")):
            if e.kind == "sliding-enter":
                start = e.t
            elif start is not None:
                out.append((start, e.t))
                start = None
        if start is not None:
            out.append((start, float(self.t[-1])))
        return out


# --- simulation driver -----------------------------------------------------------

def _resolve_kind(loop: ClosedLoop, config: SolverConfig) -> np.ndarray:
    kind = loop.load_arrays[0].copy()
    has_sw = bool(np.any(kind == KIND_SWITCHING))
    has_hy = bool(np.any(kind == KIND_HYSTERESIS))
    if config.mode == "filippov" and has_hy:
        raise ModelError("filippov mode cannot simulate hysteretic loads")
    if config.mode == "hybrid" and has_sw:
        raise ModelError("hybrid mode cannot simulate on-off switching loads")
    if config.sliding == "strict-event":
        kind[kind == KIND_SWITCHING] = KIND_STRICT
    return kind


def initial_discrete_state(loop: ClosedLoop, omega: np.ndarray, sigma: Optional[np.ndarray] = None) -> np.ndarray:
    """Branches of the on-off map at ``omega`` and validated relay states."""
    st = np.zeros(loop.n, dtype=np.int64)
    for j, load in enumerate(loop.loads):
        w = float(omega[j])
        if isinstance(load, SwitchingLoad):
            st[j] = _branch(w, load.omega_up, load.omega_down)
        elif isinstance(load, HystereticLoad):
            s = int(load.sigma if sigma is None else sigma[j])
            if s not in hysteresis_flow_set(load, w):
                raise InvalidInitialSigma(
                    f"bus {loop.network.buses[j].id}: sigma={s} not allowed at omega={w}"
                )
            st[j] = s
    return st


class _Driver:
    def __init__(self, loop: ClosedLoop, config: SolverConfig, x0: np.ndarray, st0: np.ndarray):
        self.loop, self.cfg = loop, config
        self.kind = _resolve_kind(loop, config)
        _, self.p1, self.p2, self.q1, self.q2 = loop.load_arrays
        self.L, self.Gw, self.b = loop.linear_part
        self.Mv = loop.network.inertias.copy()
        self.inv_m = 1.0 / self.Mv
        self.m, self.n, self.nx = loop.m, loop.n, loop.nx
        self.x = np.array(x0, dtype=float)
        self.st = np.array(st0, dtype=np.int64)
        self.t, self.ell, self.seg, self.kgrid = 0.0, 0, 0, 0
        self.cbase = loop.cbase(0)
        cap = int(config.t_end / config.dt) + 1024
        self.buf_t = np.empty(cap)
        self.buf_x = np.empty((cap, self.nx))
        self.buf_st = np.empty((cap, self.n), dtype=np.int64)
        self.buf_ell = np.empty(cap, dtype=np.int64)
        self.buf_seg = np.empty(cap, dtype=np.int64)
        self.buf_ev = np.zeros(cap, dtype=bool)
        self.pos = 0
        ecap = 1024
        self.ev_t, self.ev_bus, self.ev_new = np.empty(ecap), np.empty(ecap, np.int64), np.empty(ecap, np.int64)
        self.events: list[Event] = []
        self.g = np.empty(self.n)
        self.work = np.empty((5, self.nx))

    # buffers
    def _grow(self):
        extra = max(1024, len(self.buf_t))
        self.buf_t = np.concatenate([self.buf_t, np.empty(extra)])
        self.buf_x = np.concatenate([self.buf_x, np.empty((extra, self.nx))])
        self.buf_st = np.concatenate([self.buf_st, np.empty((extra, self.n), np.int64)])
        self.buf_ell = np.concatenate([self.buf_ell, np.empty(extra, np.int64)])
        self.buf_seg = np.concatenate([self.buf_seg, np.empty(extra, np.int64)])
        self.buf_ev = np.concatenate([self.buf_ev, np.zeros(extra, bool)])

    def _record(self, event: bool):
        if self.pos >= len(self.buf_t):
            self._grow()
        k = self.pos
        self.buf_t[k] = self.t
        self.buf_x[k] = self.x
        self.buf_st[k] = self.st
        self.buf_ell[k] = self.ell
        self.buf_seg[k] = self.seg
        self.buf_ev[k] = event
        self.pos += 1

    def _log(self, j: int, kind: str, detail: str = "", t: Optional[float] = None):
        bus_id = self.loop.network.buses[j].id
        self.events.append(Event(self.t if t is None else t, self.ell, bus_id, kind, detail))

    # numerics
    def step(self, x: np.ndarray, h: float) -> np.ndarray:
        c, mask, out = np.empty(self.nx), np.empty(self.nx), np.empty(self.nx)
        _forcing(self.st, self.kind, self.q1, self.q2, self.inv_m, self.cbase, self.m, self.n, c, mask)
        if self.loop.is_linear:
            _rk4(x, h, self.L, self.Gw, self.b, c, mask, self.m, self.n, self.work, out)
            return out
        return _rk4_python(self._field(c, mask), x, h)

    def _field(self, c, mask) -> Callable[[np.ndarray], np.ndarray]:
        def f(y):
            out = np.empty(self.nx)
            _rhs(y, self.L, self.Gw, self.b, c, mask, self.m, self.n, out)
            return out + self.loop.nonlinear_term(y) * mask
        return f

    def guards(self, x: np.ndarray) -> tuple[bool, np.ndarray]:
        g = np.empty(self.n)
        fired = _guards(x, self.st, self.kind, self.p1, self.p2, self.q1, self.q2,
                        self.L, self.Gw, self.b, self.cbase, self.Mv, self.m, self.n, g)
        if not self.loop.is_linear:
            # sliding guards need the nonlinear supply contribution as well
            g, fired = self._guards_nonlinear(x, g)
        return fired, g

    def _guards_nonlinear(self, x, g):
        extra = self.loop.nonlinear_term(x)[self.m:self.m + self.n] * self.Mv
        fired = False
        for j in range(self.n):
            s = self.st[j]
            if self.kind[j] == KIND_SWITCHING and abs(s) == 2:
                v = self.unloaded(x, j) + extra[j]
                g[j] = max(-v, v - self.q1[j]) if s == 2 else max(v, self.q2[j] - v)
            fired |= self._fires(j, g[j])
        return g, fired

    def _fires(self, j: int, gj: float) -> bool:
        if self.kind[j] == KIND_HYSTERESIS:
            return gj >= 0.0
        return self.kind[j] == KIND_SWITCHING and gj > 0.0

    def unloaded(self, x: np.ndarray, j: int) -> float:
        v = _unloaded_power(x, j, self.L, self.Gw, self.b, self.cbase, self.Mv, self.m)
        if not self.loop.is_linear:
            v += self.loop.nonlinear_term(x)[self.m + j] * self.Mv[j]
        return v

    def bisect(self, x0: np.ndarray, h: float):
        """Shrink ``[lo, hi]`` around the first guard firing inside a step of length ``h``."""
        tol = self.cfg.event_tol
        lo, hi = 0.0, h
        x_lo, x_hi = x0, self.step(x0, h)
        _, g_lo = self.guards(x_lo)
        fired, g_hi = self.guards(x_hi)
        if not fired:
            raise NoSignChange("no guard fires at the end of the step")
        for _ in range(self.cfg.max_bisections):
            j = next(k for k in range(self.n) if self._fires(k, g_hi[k]))
            if self.kind[j] == KIND_HYSTERESIS:
                done = g_lo[j] >= -tol
            else:
                done = g_hi[j] <= tol
            if done or hi - lo <= 4e-16 * max(1.0, abs(self.t + hi)):
                return lo, hi, x_lo, x_hi, j
            mid = 0.5 * (lo + hi)
            x_mid = self.step(x0, mid)
            fired, g_mid = self.guards(x_mid)
            if fired:
                hi, x_hi, g_hi = mid, x_mid, g_mid
            else:
                lo, x_lo, g_lo = mid, x_mid, g_mid
        raise MaxBisectionsExceeded(f"event not localized to {tol} after {self.cfg.max_bisections} halvings")

    def process(self) -> bool:
        """Apply every discrete transition enabled at the current state.

        Switching transitions are applied first and recorded as one sample;
        each relay jump then adds a sample with the jump counter incremented.
        Returns True when anything changed.
        """
        _, g = self.guards(self.x)
        tol = self.cfg.event_tol
        changed_sw = False
        for j in range(self.n):
            if self.kind[j] == KIND_SWITCHING and g[j] > 0.0:
                self._switch(j)
                changed_sw = True
        jumps = [j for j in range(self.n) if self.kind[j] == KIND_HYSTERESIS and g[j] >= -tol]
        if changed_sw or jumps:
            k = self.pos - 1
            if k >= 0 and self.buf_t[k] == self.t and self.buf_ell[k] == self.ell:
                # same hybrid time as the last sample: refresh it instead of duplicating
                self.buf_x[k] = self.x
                self.buf_st[k] = self.st
                self.buf_ev[k] = True
            else:
                self._record(True)
        for j in jumps:
            w = self.x[self.m + j]
            if self.st[j] == 0:
                self.st[j] = -1 if w < 0 else 1
                kind = "jump-on"
            else:
                self.st[j] = 0
                kind = "jump-off"
            self.ell += 1
            self._log(j, kind, f"sigma={self.st[j]}")
            self._record(True)
        return changed_sw or bool(jumps)

    def _switch(self, j: int):
        s = self.st[j]
        w_idx = self.m + j
        if abs(s) == 2:
            v = self.unloaded(self.x, j)
            if s == 2:
                self.st[j] = 1 if v > self.q1[j] else 0
            else:
                self.st[j] = -1 if v < self.q2[j] else 0
            self._log(j, "sliding-exit", f"v={v:.6g}")
            return
        w = self.x[w_idx]
        if s == 0:
            upper = w > self.p1[j]
        else:
            upper = s == 1
        level = self.p1[j] if upper else self.p2[j]
        v = self.unloaded(self.x, j)
        attracting = (0.0 < v < self.q1[j]) if upper else (self.q2[j] < v < 0.0)
        if attracting and self.kind[j] == KIND_SWITCHING:
            self.x[w_idx] = level
            self.st[j] = 2 if upper else -2
            self._log(j, "sliding-enter", f"v={v:.6g}")
        else:
            self.st[j] = _branch(w, self.p1[j], self.p2[j])
            self._log(j, "filippov-cross", f"branch={self.st[j]}")

    def _flush_strict(self, n_ev: int):
        for k in range(n_ev):
            j = int(self.ev_bus[k])
            self._log(j, "filippov-cross", f"branch={self.ev_new[k]}", t=float(self.ev_t[k]))

    def advance(self, t_stop: float) -> int:
        if self.loop.is_linear:
            while True:
                p0 = self.pos
                status, t, kgrid, pos, n_ev, h = _advance(
                    self.x, self.t, self.kgrid, t_stop, self.cfg.dt, self.L, self.Gw, self.b, self.cbase,
                    self.m, self.n, self.kind, self.p1, self.p2, self.q1, self.q2, self.Mv, self.inv_m,
                    self.st, self.cfg.eta_max, self.cfg.norm_max, self.buf_t, self.buf_x, self.buf_st,
                    self.pos, self.ev_t, self.ev_bus, self.ev_new, 0, np.empty(self.nx),
                )
                self.t, self.kgrid, self.pos = t, kgrid, pos
                self.buf_ell[p0:pos] = self.ell
                self.buf_seg[p0:pos] = self.seg
                self.buf_ev[p0:pos] = False
                self._flush_strict(n_ev)
                if status == _FULL:
                    self._grow()
                    continue
                if status == _EVFULL:
                    continue
                self.last_h = h
                return status
        return self._advance_python(t_stop)

    def _advance_python(self, t_stop: float) -> int:
        dt = self.cfg.dt
        scale = 1e-12 * max(1.0, abs(t_stop))
        while True:
            while (self.kgrid + 1) * dt <= self.t + scale:
                self.kgrid += 1
            if self.t >= t_stop - scale:
                return _DONE
            for j in range(self.n):
                if self.kind[j] == KIND_STRICT:
                    r = _branch(self.x[self.m + j], self.p1[j], self.p2[j])
                    if r != self.st[j]:
                        self.st[j] = r
                        self._log(j, "filippov-cross", f"branch={r}")
            tgt = (self.kgrid + 1) * dt
            on_grid = True
            if tgt >= t_stop - scale:
                on_grid = abs(tgt - t_stop) <= scale
                tgt = t_stop
            h = tgt - self.t
            xn = self.step(self.x, h)
            fired, _ = self.guards(xn)
            if fired:
                self.last_h = h
                return _EVENT
            self.x, self.t = xn, tgt
            if on_grid:
                self.kgrid += 1
            self._record(False)
            eta = self.x[:self.m]
            norm = np.linalg.norm(self.x)
            if np.any(np.abs(eta) > self.cfg.eta_max) or not norm <= self.cfg.norm_max:
                return _BLOWUP

    def trajectory(self, status: str = "complete") -> Trajectory:
        k = self.pos
        return Trajectory(
            self.loop, self.cfg, self.buf_t[:k].copy(), self.buf_ell[:k].copy(), self.buf_x[:k].copy(),
            self.buf_st[:k].astype(np.int8), self.buf_seg[:k].copy(), self.buf_ev[:k].copy(),
            list(self.events), self.kind.copy(), status,
        )


def _rk4_python(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def simulate(
    loop: ClosedLoop,
    config: SolverConfig = SolverConfig(),
    initial: Optional[HybridState] = None,
) -> Trajectory:
    """Integrate the closed loop over ``[0, t_end]``.

    ``initial`` defaults to the origin with every relay off. Raises
    :class:`NumericalBlowup` (carrying the partial trajectory) when an angle
    difference leaves ``(-eta_max, eta_max)`` or the state norm explodes.
    """
    if initial is None:
        x0 = np.zeros(loop.nx)
        st0 = initial_discrete_state(loop, x0[loop.m:loop.m + loop.n])
    else:
        x0 = loop.flatten(initial.continuous)
        st0 = initial_discrete_state(loop, x0[loop.m:loop.m + loop.n], initial.sigma)
    drv = _Driver(loop, config, x0, st0)
    drv._record(False)
    drv.process()
    stops = [t for t in loop.segment_times if t < config.t_end] + [config.t_end]
    for k, t_stop in enumerate(stops):
        while True:
            status = drv.advance(t_stop)
            if status == _DONE:
                break
            if status == _BLOWUP:
                raise NumericalBlowup(
                    f"state left the admissible region at t={drv.t:.6g}", drv.trajectory("blowup")
                )
            lo, hi, x_lo, x_hi, j = drv.bisect(drv.x.copy(), drv.last_h)
            if drv.kind[j] == KIND_HYSTERESIS:
                drv.t, drv.x = drv.t + lo, x_lo.copy()
            else:
                drv.t, drv.x = drv.t + hi, x_hi.copy()
            if not drv.process():
                drv._record(True)
        if t_stop < config.t_end:
            drv.seg = k + 1
            drv.cbase = loop.cbase(drv.seg)
            drv.buf_seg[drv.pos - 1] = drv.seg
            drv.process()
    return drv.trajectory()


# --- single-step building blocks -------------------------------------------------

def _driver_at(loop: ClosedLoop, state: HybridState, config: SolverConfig, segment: int = 0) -> _Driver:
    x = loop.flatten(state.continuous)
    kind = _resolve_kind(loop, config)
    st = np.zeros(loop.n, dtype=np.int64)
    omega = x[loop.m:loop.m + loop.n]
    for j in range(loop.n):
        if kind[j] == KIND_HYSTERESIS:
            st[j] = int(state.sigma[j])
        elif kind[j] in (KIND_SWITCHING, KIND_STRICT):
            if state.branch is not None:
                st[j] = int(state.branch[j])
            else:
                st[j] = _branch(omega[j], loop.load_arrays[1][j], loop.load_arrays[2][j])
    drv = _Driver(loop, config, x, st)
    drv.t, drv.ell, drv.seg = state.t, state.ell, segment
    drv.cbase = loop.cbase(segment)
    return drv


def _as_state(drv: _Driver, x: np.ndarray, t: float) -> HybridState:
    sigma = np.where(drv.kind == KIND_HYSTERESIS, drv.st, 0)
    branch = np.where((drv.kind == KIND_SWITCHING) | (drv.kind == KIND_STRICT), drv.st, 0)
    return HybridState(t, drv.ell, drv.loop.unflatten(x), sigma, branch)


def integrate_flow(
    loop: ClosedLoop, state: HybridState, dt: float, config: SolverConfig = SolverConfig(), segment: int = 0
) -> ContinuousState:
    """One Runge-Kutta step with the demand held at its current value.

    Raises :class:`StepRejected` listing the buses whose guard fires at the
    end of the step.
    """
    drv = _driver_at(loop, state, config, segment)
    xn = drv.step(drv.x, dt)
    fired, g = drv.guards(xn)
    if fired:
        buses = [loop.network.buses[j].id for j in range(loop.n) if drv._fires(j, g[j])]
        raise StepRejected(f"event inside step on buses {buses}", buses)
    return loop.unflatten(xn)


def locate_event(
    loop: ClosedLoop,
    state: HybridState,
    dt: float,
    threshold_fn: Optional[Callable[[ContinuousState], float]] = None,
    config: SolverConfig = SolverConfig(),
    segment: int = 0,
) -> tuple[float, HybridState]:
    """Time offset and state at which a threshold is crossed within a step.

    ``threshold_fn`` maps a continuous state to a scalar whose sign change
    marks the event; it defaults to the loads' own guards. The returned
    state lies within ``event_tol`` of the threshold.
    """
    drv = _driver_at(loop, state, config, segment)
    x0 = drv.x.copy()
    if threshold_fn is None:
        lo, hi, x_lo, x_hi, j = drv.bisect(x0, dt)
        if drv.kind[j] == KIND_HYSTERESIS:
            return lo, _as_state(drv, x_lo, state.t + lo)
        return hi, _as_state(drv, x_hi, state.t + hi)
    f0 = threshold_fn(loop.unflatten(x0))
    x1 = drv.step(x0, dt)
    f1 = threshold_fn(loop.unflatten(x1))
    if f0 == 0.0:
        return 0.0, state
    if f1 == 0.0:
        return dt, _as_state(drv, x1, state.t + dt)
    if np.sign(f0) == np.sign(f1):
        raise NoSignChange(f"threshold function keeps its sign over the step ({f0:.3g}, {f1:.3g})")
    lo, hi, x_lo, x_hi = 0.0, dt, x0, x1
    f_hi = f1
    for _ in range(config.max_bisections):
        if abs(f_hi) <= config.event_tol or hi - lo <= 4e-16 * max(1.0, abs(state.t + hi)):
            return hi, _as_state(drv, x_hi, state.t + hi)
        mid = 0.5 * (lo + hi)
        x_mid = drv.step(x0, mid)
        f_mid = threshold_fn(loop.unflatten(x_mid))
        if np.sign(f_mid) == np.sign(f0):
            lo, x_lo = mid, x_mid
        else:
            hi, x_hi, f_hi = mid, x_mid, f_mid
    raise MaxBisectionsExceeded(f"threshold not localized to {config.event_tol}")


def sliding_step(
    loop: ClosedLoop, state: HybridState, bus: int, dt: float, config: SolverConfig = SolverConfig(), segment: int = 0
) -> tuple[HybridState, float]:
    """Advance one step holding bus ``bus`` on its nearest switching threshold.

    Returns the new state and the equivalent demand, the value inside the
    set-valued demand that keeps the bus frequency constant. Raises
    :class:`NotAttracting` when the vector fields on the two sides of the
    threshold do not both point toward it.
    """
    j = loop.network.index[bus]
    load = loop.loads[j]
    if not isinstance(load, SwitchingLoad):
        raise ModelError(f"bus {bus} has no switching load")
    cfg = replace(config, mode="auto", sliding="equivalent-control")
    drv = _driver_at(loop, state, cfg, segment)
    w = drv.x[loop.m + j]
    upper = abs(w - load.omega_up) <= abs(w - load.omega_down)
    drv.x[loop.m + j] = load.omega_up if upper else load.omega_down
    v = drv.unloaded(drv.x, j)
    ok = (0.0 < v < load.d_up) if upper else (load.d_down < v < 0.0)
    if not ok:
        raise NotAttracting(f"bus {bus}: unloaded power {v:.6g} outside the sliding range")
    drv.st[j] = 2 if upper else -2
    xn = drv.step(drv.x, dt)
    return _as_state(drv, xn, state.t + dt), v


# --- post-processing ----------------------------------------------------------------

@dataclass(frozen=True)
class ChatterStats:
    flag: bool
    max_in_window: int
    total_switches: int
    sliding_time: float


SWITCH_KINDS = ("filippov-cross", "jump-on", "jump-off", "sliding-enter")


def chattering_report(traj: Trajectory, window: Optional[float] = None, count: Optional[int] = None) -> dict[int, ChatterStats]:
    """Per controllable bus: flagged when it slides or switches more than ``count`` times in a window."""
    window = traj.config.chatter_window if window is None else window
    count = traj.config.chatter_count if count is None else count
    out = {}
    for j, bus in enumerate(traj.loop.network.buses):
        if traj.kind[j] == KIND_NONE:
            continue
        times = np.array([e.t for e in traj.bus_events(j, SWITCH_KINDS)])
        best = 0
        if times.size:
            ends = np.searchsorted(times, times + window, side="right")
            best = int(np.max(ends - np.arange(times.size)))
        slide = sum(b - a for a, b in traj.sliding_intervals(j))
        has_slide = bool(traj.sliding_intervals(j))
        out[bus.id] = ChatterStats(has_slide or best > count, best, int(times.size), float(slide))
    return out


@dataclass(frozen=True)
class DwellReport:
    min_gap: float
    bound: float
    n_switches: int
    max_abs_omega_dot: float
    satisfied: bool


def min_dwell_time(traj: Trajectory, strict: bool = False) -> dict[int, DwellReport]:
    """Smallest time between consecutive relay switches against the band-width bound.

    The bound is the band width divided by the largest observed ``|omega_dot|``
    on the bus. Buses with fewer than two switches are omitted; with
    ``strict=True`` an empty result raises :class:`InsufficientSwitches`.
    """
    out = {}
    tol = traj.config.event_tol
    wd = np.abs(traj.omega_dot)
    for j, bus in enumerate(traj.loop.network.buses):
        load = bus.load
        if traj.kind[j] != KIND_HYSTERESIS:
            continue
        times = np.array([e.t for e in traj.bus_events(j, ("jump-on", "jump-off"))])
        if times.size < 2:
            continue
        gap = float(np.min(np.diff(times)))
        dmax = float(wd[:, j].max())
        bound = load.width / dmax if dmax > 0 else math.inf
        ok = gap >= (load.width - 2 * tol) / dmax if dmax > 0 else True
        out[bus.id] = DwellReport(gap, bound, int(times.size), dmax, bool(ok))
    if strict and not out:
        raise InsufficientSwitches("no bus switches at least twice")
    return out
