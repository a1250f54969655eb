import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from gridswitch.analysis import lyapunov_value, solve_equilibrium
from gridswitch.errors import NoEquilibriumFound
from gridswitch.network import ContinuousState, build_network, swing_rhs
from gridswitch.solver import HybridState, SolverConfig, simulate
from gridswitch.supply import (
    PILag,
    PISecondOrder,
    TransferFunction,
    derive_storage,
    realize_transfer_function,
    supply_flow,
)
from invariants import hybrid_violations, random_relay_loop

seeds = st.integers(0, 2**32 - 1)


@st.composite
def networks(draw, max_buses=6):
    rng = np.random.default_rng(draw(seeds))
    n = int(rng.integers(1, max_buses + 1))
    lines = {(j, int(rng.integers(1, j))) for j in range(2, n + 1)}
    for _ in range(int(rng.integers(0, n))):
        a, b = rng.choice(np.arange(1, n + 1), 2, replace=False) if n > 1 else (1, 1)
        if a != b and (a, b) not in lines and (b, a) not in lines:
            lines.add((int(a), int(b)))
    spec = {
        "buses": [{"id": j, "inertia": float(rng.uniform(0.5, 5))} for j in range(1, n + 1)],
        "lines": [{"from": a, "to": b, "susceptance": float(rng.uniform(0.5, 8))} for a, b in sorted(lines)],
    }
    return build_network(spec), rng


# --- swing dynamics ----------------------------------------------------------

@given(networks())
def test_line_terms_cancel(arg):
    net, rng = arg
    n, m = net.n_buses, net.n_lines
    eta = rng.uniform(-3, 3, m)
    state = ContinuousState(eta, rng.normal(size=n), ())
    pl, s, d = rng.normal(size=(3, n))
    _, wd = swing_rhs(net, state, s, d, pl)
    assert np.sum(net.inertias * wd) == pytest.approx(np.sum(-pl + s - d), abs=1e-10)


@given(networks())
def test_angle_rate_depends_only_on_frequency(arg):
    net, rng = arg
    n, m = net.n_buses, net.n_lines
    w = rng.normal(size=n)
    a, _ = swing_rhs(net, ContinuousState(rng.uniform(-3, 3, m), w, ()), np.zeros(n), np.zeros(n))
    b, _ = swing_rhs(net, ContinuousState(rng.uniform(-3, 3, m), w, ()), np.zeros(n), np.zeros(n))
    np.testing.assert_array_equal(a, b)


@given(networks())
def test_jacobian_matches_finite_differences(arg):
    net, rng = arg
    n, m = net.n_buses, net.n_lines
    eta, w = rng.uniform(-1.5, 1.5, m), rng.normal(size=n)
    zeros = np.zeros(n)

    def f(z):
        ed, wd = swing_rhs(net, ContinuousState(z[:m], z[m:], ()), zeros, zeros, zeros)
        return np.concatenate([ed, wd])

    inc, B, M = net.incidence, net.susceptances, net.inertias
    J = np.zeros((m + n, m + n))
    J[:m, m:] = inc.T
    J[m:, :m] = -(inc * (B * np.cos(eta))) / M[:, None]
    z = np.concatenate([eta, w])
    h = 1e-6
    fd = np.column_stack([(f(z + h * e) - f(z - h * e)) / (2 * h) for e in np.eye(m + n)])
    np.testing.assert_allclose(fd, J, rtol=1e-6, atol=1e-8)


# --- supplies ----------------------------------------------------------------

@st.composite
def transfer_functions(draw):
    rng = np.random.default_rng(draw(seeds))
    n = int(rng.integers(1, 6))
    roots = -rng.uniform(0.1, 10, n)
    den = np.polynomial.polynomial.polyfromroots(roots) * rng.uniform(0.5, 2)
    num = rng.normal(size=int(rng.integers(1, n + 2)))
    return TransferFunction(tuple(num), tuple(den))


@given(transfer_functions())
def test_realization_frequency_response(tf):
    ss = realize_transfer_function(tf)
    A, B, C, D = ss.state_space()
    rng = np.random.default_rng(0)
    w = np.sort(rng.uniform(1e-2, 1e2, 20))
    got = np.array([C @ np.linalg.solve(1j * x * np.eye(ss.order) - A, B) + D for x in w])
    P = np.polynomial.polynomial.polyval
    expected = P(1j * w, tf.num) / P(1j * w, tf.den)
    np.testing.assert_allclose(got, expected, rtol=1e-9, atol=1e-12)


@st.composite
def passive_pi(draw):
    rng = np.random.default_rng(draw(seeds))
    K, tb = rng.uniform(0.1, 2), rng.uniform(0.1, 1)
    if rng.random() < 0.5:
        return PILag(K, K * tb * rng.uniform(1.05, 3), tb, rng.uniform(0, 0.5))
    tg = rng.uniform(0.1, 1)
    return PISecondOrder(K, K * (tb + tg) * rng.uniform(1.05, 3), tb, tg)


@settings(max_examples=25, deadline=None)
@given(passive_pi(), seeds)
def test_storage_dissipation_along_trajectories(model, seed):
    rng = np.random.default_rng(seed)
    sf = derive_storage(model, 0.0)
    amp, freq, phase = rng.uniform(0.01, 0.2, 3), rng.uniform(0.1, 5, 3), rng.uniform(0, 6, 3)

    def omega(t):
        return float(np.sum(amp * np.sin(freq * t + phase)))

    x_star = model.rest_state(0.0)
    sol = solve_ivp(lambda t, x: supply_flow(model, x, omega(t))[0], (0, 5), x_star,
                    rtol=1e-11, atol=1e-12, dense_output=True, max_step=0.01)
    t = np.linspace(0, 5, 5001)
    X = sol.sol(t).T
    rate = np.array([-omega(tk) * (supply_flow(model, xk, omega(tk))[1] - 0.0) for tk, xk in zip(t, X)])
    V = sf.value(X)
    supplied = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(t) * (rate[1:] + rate[:-1]))])
    slack = V - V[0] - supplied
    assert slack.max() <= 1e-6 * 5 + 1e-8


# --- equilibria and energy ---------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(seeds)
def test_equilibrium_residual_random(seed):
    loop = random_relay_loop(np.random.default_rng(seed))
    try:
        eq = solve_equilibrium(loop)
    except NoEquilibriumFound:
        return
    f = loop.vector_field(eq.flatten(), np.zeros(loop.n, dtype=np.int64), np.zeros(loop.n, dtype=np.int64))
    assert np.abs(f).max() <= 1e-8
    np.testing.assert_array_equal(eq.omega_star, 0.0)


@settings(max_examples=30, deadline=None)
@given(seeds)
def test_energy_positive_near_equilibrium(seed):
    rng = np.random.default_rng(seed)
    loop = random_relay_loop(rng)
    eq = solve_equilibrium(loop)
    storages = [derive_storage(s, 0.0) for s in loop.supplies]
    assert lyapunov_value(loop.unflatten(eq.flatten()), eq, storages).total == pytest.approx(0.0, abs=1e-14)
    x = eq.flatten() + rng.normal(scale=0.05, size=loop.nx)
    cs = loop.unflatten(x)
    if np.all(np.abs(cs.eta) < np.pi / 2):
        v = lyapunov_value(cs, eq, storages)
        assert v.v_f >= 0 and v.v_p >= 0 and min(v.v_s) >= -1e-12 and v.total > 0


# --- hybrid semantics --------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(seeds)
def test_random_relay_runs_respect_hybrid_semantics(seed):
    loop = random_relay_loop(np.random.default_rng(seed))
    eq = solve_equilibrium(loop)
    init = HybridState(0.0, 0, loop.unflatten(eq.flatten()), np.zeros(loop.n, dtype=np.int64))
    traj = simulate(loop, SolverConfig(t_end=8.0), init)
    assert hybrid_violations(traj) == []


@settings(max_examples=10, deadline=None)
@given(seeds)
def test_runs_are_reproducible(seed):
    loop = random_relay_loop(np.random.default_rng(seed))
    eq = solve_equilibrium(loop)
    init = HybridState(0.0, 0, loop.unflatten(eq.flatten()), np.zeros(loop.n, dtype=np.int64))
    a = simulate(loop, SolverConfig(t_end=3.0), init)
    b = simulate(loop, SolverConfig(t_end=3.0), init)
    assert np.array_equal(a.x, b.x) and a.events == b.events
