import numpy as np
import pytest

from gridswitch.errors import (
    DegenerateLeadingCoefficient,
    DimensionMismatch,
    EmptyGrid,
    ImproperTransferFunction,
    NonlinearModelUnsupported,
    NonPositiveParameter,
    StorageSearchFailed,
    UndeclaredIntegrator,
    UnsupportedVariant,
)
from gridswitch.supply import (
    LinearStateSpace,
    NonlinearSupply,
    PILag,
    PISecondOrder,
    StaticDamping,
    TransferFunction,
    check_passivity,
    derive_storage,
    gain_condition,
    gain_margin,
    governor_transfer_function,
    realize_transfer_function,
    supply_flow,
)

PAPER_PILAG = PILag(K=1.0, D=0.3, tau_beta=0.5, K_tilde=0.3)


def rational(num, den, s):
    """Direct evaluation of a rational function with ascending coefficients."""
    return np.polynomial.polynomial.polyval(s, num) / np.polynomial.polynomial.polyval(s, den)


def realized_response(ss, w):
    A, B, C, D = ss.state_space()
    n = A.shape[0]
    return np.array([C @ np.linalg.solve(1j * wk * np.eye(n) - A, B) + D for wk in w])


# --- flows -------------------------------------------------------------------

def test_pilag_rest_at_origin():
    dx, s = supply_flow(PAPER_PILAG, [0.0, 0.0], 0.0)
    np.testing.assert_array_equal(dx, [0.0, 0.0])
    assert s == 0.0


def test_static_damping_output():
    _, s = supply_flow(StaticDamping(0.3), np.zeros(0), 0.1)
    assert s == pytest.approx(-0.03)


def test_second_order_hand_values():
    model = PISecondOrder(K=1.0, D=0.3, tau_beta=0.1, tau_gamma=0.1)
    dx, s = supply_flow(model, [1.0, 0.5, 0.2], 0.05)
    np.testing.assert_allclose(dx, [-0.05, 5.0, 3.0], rtol=1e-12)
    assert s == pytest.approx(0.185, rel=1e-12)


def test_pilag_equations():
    model = PILag(K=2.0, D=0.5, tau_beta=0.25, K_tilde=0.4)
    dx, s = supply_flow(model, [0.3, -0.1], 0.02)
    np.testing.assert_allclose(dx, [-0.04, (0.1 + 0.3 - 0.008) / 0.25], rtol=1e-12)
    assert s == pytest.approx(-0.1 - 0.01)


def test_flow_dimension_checked():
    with pytest.raises(DimensionMismatch):
        supply_flow(PAPER_PILAG, [0.0], 0.0)


@pytest.mark.parametrize("kw", [dict(K=0.0, D=1, tau_beta=1), dict(K=1, D=-1, tau_beta=1),
                                dict(K=1, D=1, tau_beta=0), dict(K=1, D=1, tau_beta=1, K_tilde=-0.1)])
def test_pilag_parameter_validation(kw):
    with pytest.raises(NonPositiveParameter):
        PILag(**kw)


INTEGRATING = [PAPER_PILAG, PISecondOrder(K=1.0, D=0.3, tau_beta=0.1, tau_gamma=0.1)]
DAMPING_ONLY = [StaticDamping(0.7), realize_transfer_function(governor_transfer_function())]


@pytest.mark.parametrize("model", INTEGRATING)
@pytest.mark.parametrize("s_star", [0.0, 0.37, -1.2])
def test_integrator_rest_state_holds_any_output(model, s_star):
    dx, s = supply_flow(model, model.rest_state(s_star), 0.0)
    np.testing.assert_allclose(dx, 0.0, atol=1e-12)
    assert s == pytest.approx(s_star, abs=1e-12)


@pytest.mark.parametrize("model", DAMPING_ONLY)
def test_rest_state_is_stationary(model):
    dx, s = supply_flow(model, model.rest_state(0.0), 0.0)
    np.testing.assert_allclose(dx, 0.0, atol=1e-12)
    assert s == pytest.approx(0.0, abs=1e-12)


def test_restores_frequency_flags():
    assert PAPER_PILAG.restores_frequency
    assert PISecondOrder(1, 1, 1, 1).restores_frequency
    assert not StaticDamping(1.0).restores_frequency
    assert not realize_transfer_function(governor_transfer_function()).restores_frequency
    tf = TransferFunction((1.0,), (0.0, 1.0), integrator=True)
    assert realize_transfer_function(tf).restores_frequency


def test_frequency_response_matches_flow_model():
    # the state-space route and the hand-written equations describe the same system
    model = PILag(K=0.7, D=0.4, tau_beta=0.3, K_tilde=0.2)
    w = np.logspace(-2, 2, 11)
    s = 1j * w
    expected = model.K / (s * (1 + model.tau_beta * s)) + model.K_tilde / (1 + model.tau_beta * s) + model.D
    np.testing.assert_allclose(model.frequency_response(w), expected, rtol=1e-12)


# --- realization -------------------------------------------------------------

def test_first_order_lag_realization():
    ss = realize_transfer_function(TransferFunction((1.0,), (1.0, 1.0)))
    A, B, C, D = ss.state_space()
    np.testing.assert_allclose(A, [[-1.0]])
    np.testing.assert_allclose(B, [1.0])
    np.testing.assert_allclose(C, [1.0])
    assert D == 0.0


def test_pi_lag_transfer_function_diverges_at_dc():
    K, tau, D = 1.0, 0.5, 0.3
    num = (K, D, D * tau)  # K + D s (1 + tau s)
    den = (0.0, 1.0, tau)  # s (1 + tau s)
    ss = realize_transfer_function(TransferFunction(num, den, integrator=True))
    assert ss.order == 2
    w = np.logspace(-1, 2, 20)
    np.testing.assert_allclose(realized_response(ss, w), rational(num, den, 1j * w), rtol=1e-9)
    mags = np.abs(realized_response(ss, np.array([1e-3, 1e-5, 1e-7])))
    assert np.all(np.diff(mags) > 0) and mags[-1] > 1e6


def test_equal_time_constant_governor_keeps_three_states():
    tf = governor_transfer_function(K=25, D=1, T_s=0.1, T_3=0.1, T_c=0.1, T_4=0.1, T_5=0.1)
    ss = realize_transfer_function(tf)
    assert ss.order == 3
    w = np.logspace(-2, 3, 20)
    np.testing.assert_allclose(realized_response(ss, w), rational(tf.num, tf.den, 1j * w), rtol=1e-9)


def test_governor_realization_matches_factored_form():
    T_s, T_3, T_c, T_4, T_5, K, D = 0.04, 0.25, 0.4, 0.3, 8.0, 25.0, 1.0
    ss = realize_transfer_function(governor_transfer_function())
    w = np.logspace(-3, 3, 20)
    s = 1j * w
    expected = K * (1 + s * T_3) * (1 + s * T_4) / ((1 + s * T_s) * (1 + s * T_c) * (1 + s * T_5)) + D
    np.testing.assert_allclose(realized_response(ss, w), expected, rtol=1e-9)


def test_realization_errors():
    with pytest.raises(ImproperTransferFunction):
        realize_transfer_function(TransferFunction((1.0, 1.0, 1.0), (1.0, 1.0)))
    with pytest.raises(DegenerateLeadingCoefficient):
        realize_transfer_function(TransferFunction((1.0,), (1.0, 0.0)))
    with pytest.raises(UndeclaredIntegrator):
        realize_transfer_function(TransferFunction((1.0,), (0.0, 1.0)))


# --- passivity ---------------------------------------------------------------

def test_paper_gains_pass():
    cert = check_passivity(PAPER_PILAG, 0.01)
    assert cert.passed and cert.min_real_part >= 0.01
    assert cert.validity_note


def test_pilag_too_slow_fails_against_dense_sweep():
    model = PILag(K=1.0, D=0.3, tau_beta=1.0, K_tilde=0.3)
    cert = check_passivity(model)
    assert not cert.passed
    w = np.logspace(-4, 4, 200001)
    oracle = (model.K / (1j * w * (1 + 1j * w)) + model.K_tilde / (1 + 1j * w) + model.D).real
    assert oracle.min() < 0
    assert cert.min_real_part < 0


@pytest.mark.parametrize("eps, ok", [(0.0, True), (0.3, True), (0.31, False)])
def test_static_damping_margin(eps, ok):
    assert check_passivity(StaticDamping(0.3), eps).passed is ok


def test_certificate_grid_and_verdict():
    grid = np.array([0.1, 1.0, 10.0])
    cert = check_passivity(PAPER_PILAG, 0.0, grid)
    np.testing.assert_array_equal(cert.freq_grid, grid)
    assert cert.argmin_frequency in grid
    with pytest.raises(EmptyGrid):
        check_passivity(PAPER_PILAG, 0.0, np.array([]))
    with pytest.raises(EmptyGrid):
        check_passivity(PAPER_PILAG, 0.0, np.array([1.0, 0.5]))


def test_nonlinear_not_certified():
    model = NonlinearSupply(f=lambda x, u: np.zeros(0), g=lambda x, u: u + u**3, x_rest=np.zeros(0))
    with pytest.raises(NonlinearModelUnsupported):
        check_passivity(model)


def test_marginal_gain_has_zero_minimum():
    model = PILag(K=1.0, D=0.3, tau_beta=0.5, K_tilde=0.2)
    assert gain_margin(model) == pytest.approx(0.0, abs=1e-15)
    cert = check_passivity(model)
    assert abs(cert.min_real_part) < 1e-6


def test_gain_conditions():
    assert gain_condition(PAPER_PILAG)
    assert gain_condition(PISecondOrder(K=1.0, D=0.3, tau_beta=0.1, tau_gamma=0.1))
    assert not gain_condition(PISecondOrder(K=2.0, D=0.3, tau_beta=0.1, tau_gamma=0.1))
    with pytest.raises(UnsupportedVariant):
        gain_condition(StaticDamping(1.0))


# --- storage -----------------------------------------------------------------

def test_stateless_storage():
    sf = derive_storage(StaticDamping(0.3), 0.3)
    assert sf.P.shape == (0, 0)
    with pytest.raises(StorageSearchFailed):
        derive_storage(StaticDamping(0.3), 0.31)


def test_first_order_lag_storage():
    lag = LinearStateSpace(np.array([[-1.0]]), np.array([1.0]), np.array([1.0]), 0.0)
    sf = derive_storage(lag, 0.0)
    assert sf.P[0, 0] == pytest.approx(0.5, rel=1e-4)
    # without feedthrough no positive input penalty can be afforded
    with pytest.raises(StorageSearchFailed):
        derive_storage(lag, 0.01)


def dissipation_oracle(model, P, eps, n=3000, seed=7):
    """Worst d/dt V - (u y - eps u^2) using the model's own flow equations."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(n):
        x = rng.uniform(-2, 2, model.order)
        omega = rng.uniform(-2, 2)
        dx, y = supply_flow(model, x, omega)
        u = -omega
        worst = max(worst, 2 * x @ P @ dx - (u * y - eps * u * u))
    return worst


@pytest.mark.parametrize("model", [
    PAPER_PILAG,
    PILag(K=0.5, D=1.0, tau_beta=0.5, K_tilde=0.2),
    PISecondOrder(K=1.0, D=0.3, tau_beta=0.1, tau_gamma=0.1),
])
def test_storage_satisfies_dissipation(model):
    sf = derive_storage(model, 0.01)
    assert np.linalg.eigvalsh(sf.P).min() > -1e-9
    assert dissipation_oracle(model, sf.P, 0.01) <= 1e-8


def test_governor_storage():
    ss = realize_transfer_function(governor_transfer_function())
    sf = derive_storage(ss, 0.5)
    A, B, C, D = ss.state_space()
    rng = np.random.default_rng(3)
    for _ in range(1000):
        x = rng.uniform(-1, 1, 3)
        u = rng.uniform(-1, 1)
        xdot = A @ x + B * u
        y = C @ x + D * u
        assert 2 * x @ sf.P @ xdot <= u * y - 0.5 * u * u + 1e-8


def test_non_passive_storage_fails():
    with pytest.raises(StorageSearchFailed):
        derive_storage(PILag(K=1.0, D=0.3, tau_beta=1.0, K_tilde=0.3), 0.0)


def test_storage_zero_at_shift():
    sf = derive_storage(PAPER_PILAG, 0.01).with_shift(np.array([0.2, 0.2]))
    assert sf.value(np.array([0.2, 0.2])) == 0.0
    assert sf.value(np.array([0.5, -0.1])) >= 0.0
