"""Net-supply dynamics driven by the negative frequency deviation.

Every model maps the input ``u = -omega`` (rad/s) to a net power supply ``s``
(p.u.). Linear models expose a state-space form ``(A, B, C, Dff)`` in that
input convention, which the simulator assembles into block matrices and the
passivity routines evaluate on the imaginary axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.linalg import LinAlgError, inv, null_space, orth, solve_continuous_are

from .errors import (
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

DEFAULT_GRID = np.logspace(-3, 3, 10_000)
LOCAL_VALIDITY_NOTE = (
    "local certificate: the dissipation inequality is only claimed on unquantified "
    "neighbourhoods of the equilibrium input and state"
)


def _positive(name: str, value: float, allow_zero: bool = False) -> None:
    ok = value >= 0 if allow_zero else value > 0
    if not (ok and np.isfinite(value)):
        raise NonPositiveParameter(f"{name} must be {'>= 0' if allow_zero else '> 0'}, got {value}")


class SupplyModel:
    """Base class. Subclasses define ``order`` and ``flow``."""

    order: int = 0
    is_linear: bool = True

    def flow(self, x: np.ndarray, omega: float) -> tuple[np.ndarray, float]:
        A, B, C, D = self.state_space()
        u = -omega
        return A @ x + B * u, float(C @ x + D * u)

    def state_space(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
        raise NonlinearModelUnsupported(f"{type(self).__name__} has no state-space form")

    @property
    def restores_frequency(self) -> bool:
        """True when an equilibrium can only be reached at zero frequency."""
        A, B, _, _ = self.state_space()
        if A.size == 0:
            return False
        # a constant nonzero input is compatible with rest iff B lies in range(A)
        sol, *_ = np.linalg.lstsq(A, B, rcond=None)
        return np.linalg.norm(A @ sol - B) > 1e-9 * max(1.0, np.linalg.norm(B))

    def rest_state(self, s_star: float = 0.0) -> np.ndarray:
        """Internal state at zero frequency producing output ``s_star``.

        Models without integral action can only rest at their natural output,
        which is zero for every linear variant.
        """
        A, _, C, _ = self.state_space()
        n = A.shape[0]
        if n == 0:
            return np.zeros(0)
        lhs = np.vstack([A, C.reshape(1, n)])
        rhs = np.concatenate([np.zeros(n), [s_star]])
        x, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
        if np.linalg.norm(lhs @ x - rhs) > 1e-9 * max(1.0, abs(s_star)):
            if not self.restores_frequency and abs(s_star) <= 1e-12:
                return np.zeros(n)
            raise DimensionMismatch(f"{type(self).__name__} cannot rest with output {s_star}")
        return x

    def rest_output(self) -> float:
        return 0.0

    def frequency_response(self, w: np.ndarray) -> np.ndarray:
        """Complex gain from ``-omega`` to ``s`` at angular frequencies ``w``."""
        A, B, C, D = self.state_space()
        w = np.asarray(w, dtype=float)
        n = A.shape[0]
        if n == 0:
            return np.full(w.shape, D, dtype=complex)
        pencil = 1j * w[:, None, None] * np.eye(n) - A
        x = np.linalg.solve(pencil, np.broadcast_to(B.astype(complex), (len(w), n))[..., None])
        return x[..., 0] @ C.astype(complex) + D


@dataclass(frozen=True)
class StaticDamping(SupplyModel):
    D: float
    order: int = field(default=0, init=False)

    def __post_init__(self):
        _positive("D", self.D)

    def flow(self, x, omega):
        return np.zeros(0), -self.D * omega

    def state_space(self):
        return np.zeros((0, 0)), np.zeros(0), np.zeros(0), float(self.D)


@dataclass(frozen=True)
class PILag(SupplyModel):
    """Integral action plus droop, both passed through a first-order lag.

    States ``(alpha, beta)``: ``alpha' = -K w``,
    ``tau_beta beta' = -beta + alpha - K_tilde w``, ``s = beta - D w``.
    """

    K: float
    D: float
    tau_beta: float
    K_tilde: float = 0.0
    order: int = field(default=2, init=False)

    def __post_init__(self):
        _positive("K", self.K)
        _positive("D", self.D)
        _positive("tau_beta", self.tau_beta)
        _positive("K_tilde", self.K_tilde, allow_zero=True)

    def flow(self, x, omega):
        alpha, beta = x
        dx = np.array([-self.K * omega, (-beta + alpha - self.K_tilde * omega) / self.tau_beta])
        return dx, beta - self.D * omega

    def state_space(self):
        t = self.tau_beta
        A = np.array([[0.0, 0.0], [1.0 / t, -1.0 / t]])
        B = np.array([self.K, self.K_tilde / t])
        C = np.array([0.0, 1.0])
        return A, B, C, float(self.D)

    def rest_state(self, s_star=0.0):
        return np.array([s_star, s_star], dtype=float)


@dataclass(frozen=True)
class PISecondOrder(SupplyModel):
    """Integrator in series with two first-order lags, plus damping.

    States ``(alpha, beta, gamma)``: ``alpha' = -K w``,
    ``tau_beta beta' = -beta + alpha``, ``tau_gamma gamma' = -gamma + beta``,
    ``s = gamma - D w``.
    """

    K: float
    D: float
    tau_beta: float
    tau_gamma: float
    order: int = field(default=3, init=False)

    def __post_init__(self):
        for name in ("K", "D", "tau_beta", "tau_gamma"):
            _positive(name, getattr(self, name))

    def flow(self, x, omega):
        alpha, beta, gamma = x
        dx = np.array([
            -self.K * omega,
            (-beta + alpha) / self.tau_beta,
            (-gamma + beta) / self.tau_gamma,
        ])
        return dx, gamma - self.D * omega

    def state_space(self):
        tb, tg = self.tau_beta, self.tau_gamma
        A = np.array([[0.0, 0.0, 0.0], [1 / tb, -1 / tb, 0.0], [0.0, 1 / tg, -1 / tg]])
        B = np.array([self.K, 0.0, 0.0])
        C = np.array([0.0, 0.0, 1.0])
        return A, B, C, float(self.D)

    def rest_state(self, s_star=0.0):
        return np.full(3, s_star, dtype=float)


@dataclass(frozen=True, eq=False)
class LinearStateSpace(SupplyModel):
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Dff: float = 0.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float)) if np.size(self.A) else np.zeros((0, 0))
        n = A.shape[0]
        B = np.asarray(self.B, dtype=float).reshape(-1)
        C = np.asarray(self.C, dtype=float).reshape(-1)
        if A.shape != (n, n) or B.shape != (n,) or C.shape != (n,):
            raise DimensionMismatch(f"inconsistent state-space shapes A{A.shape} B{B.shape} C{C.shape}")
        if np.ndim(self.Dff) != 0:
            raise DimensionMismatch("Dff must be a scalar")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "Dff", float(self.Dff))

    @property
    def order(self) -> int:
        return self.A.shape[0]

    def state_space(self):
        return self.A, self.B, self.C, self.Dff


@dataclass(frozen=True, eq=False)
class TransferFunction(SupplyModel):
    """Rational gain from ``-omega`` to ``s``; coefficients in ascending powers of s.

    A pole at the origin must be declared with ``integrator=True``.
    Simulation uses the realization from :func:`realize_transfer_function`.
    """

    num: Sequence[float]
    den: Sequence[float]
    integrator: bool = False

    @property
    def order(self) -> int:
        return len(np.trim_zeros(np.asarray(self.den, float), "b")) - 1

    def state_space(self):
        return realize_transfer_function(self).state_space()

    def flow(self, x, omega):
        return realize_transfer_function(self).flow(x, omega)

    def frequency_response(self, w):
        s = 1j * np.asarray(w, dtype=float)
        return npoly.polyval(s, np.asarray(self.num, float)) / npoly.polyval(s, np.asarray(self.den, float))


@dataclass(frozen=True, eq=False)
class NonlinearSupply(SupplyModel):
    """Plug-in for general dynamics ``x' = f(x, u)``, ``s = g(x, u)`` with ``u = -omega``.

    ``equilibrium`` maps a requested output to a rest state; it is needed
    only for buses flagged ``restores``.
    """

    f: Callable[[np.ndarray, float], np.ndarray]
    g: Callable[[np.ndarray, float], float]
    x_rest: np.ndarray
    restores: bool = False
    equilibrium: Optional[Callable[[float], np.ndarray]] = None
    is_linear: bool = field(default=False, init=False)

    @property
    def order(self) -> int:
        return int(np.size(self.x_rest))

    @property
    def restores_frequency(self) -> bool:
        return self.restores

    def flow(self, x, omega):
        x = np.asarray(x, dtype=float)
        return np.asarray(self.f(x, -omega), dtype=float), float(self.g(x, -omega))

    def rest_state(self, s_star=0.0):
        if self.equilibrium is not None:
            return np.asarray(self.equilibrium(s_star), dtype=float)
        return np.asarray(self.x_rest, dtype=float)

    def rest_output(self):
        return float(self.g(np.asarray(self.x_rest, float), 0.0))

    def frequency_response(self, w):
        raise NonlinearModelUnsupported("frequency response needs a linear model")


def governor_transfer_function(
    K: float = 25.0,
    D: float = 1.0,
    T_s: float = 0.04,
    T_3: float = 0.25,
    T_c: float = 0.4,
    T_4: float = 0.3,
    T_5: float = 8.0,
) -> TransferFunction:
    """Turbine-governor gain K(1+sT3)(1+sT4) / ((1+sTs)(1+sTc)(1+sT5)) + D.

    The default time constants are a synthetic set, not toolbox data.
    No pole-zero cancellation is attempted.
    """
    for name, v in dict(K=K, D=D, T_s=T_s, T_3=T_3, T_c=T_c, T_4=T_4, T_5=T_5).items():
        _positive(name, v)
    num = K * npoly.polymul([1.0, T_3], [1.0, T_4])
    den = npoly.polymul(npoly.polymul([1.0, T_s], [1.0, T_c]), [1.0, T_5])
    return TransferFunction(tuple(npoly.polyadd(num, D * den)), tuple(den))


def supply_flow(model: SupplyModel, x_s: np.ndarray, omega: float) -> tuple[np.ndarray, float]:
    x_s = np.asarray(x_s, dtype=float).reshape(-1)
    if x_s.shape != (model.order,):
        raise DimensionMismatch(f"{type(model).__name__} expects {model.order} states, got {x_s.shape[0]}")
    return model.flow(x_s, float(omega))


def realize_transfer_function(tf: TransferFunction) -> LinearStateSpace:
    """Controllable-canonical realization of a proper rational transfer function."""
    den = np.asarray(tf.den, dtype=float)
    num = np.trim_zeros(np.asarray(tf.num, dtype=float), "b")
    if den.size == 0 or den[-1] == 0.0:
        raise DegenerateLeadingCoefficient(f"denominator leading coefficient is zero: {list(den)}")
    if num.size == 0:
        num = np.zeros(1)
    n = den.size - 1
    if num.size - 1 > n:
        raise ImproperTransferFunction(f"numerator degree {num.size - 1} exceeds denominator degree {n}")
    if den[0] == 0.0 and not tf.integrator:
        raise UndeclaredIntegrator("denominator has a root at s=0; set integrator=True to allow it")
    a = den / den[-1]
    b = np.zeros(n + 1)
    b[: num.size] = num / den[-1]
    dff = b[n]
    c = b[:n] - dff * a[:n]
    A = np.zeros((n, n))
    if n:
        A[:-1, 1:] = np.eye(n - 1)
        A[-1, :] = -a[:n]
    B = np.zeros(n)
    if n:
        B[-1] = 1.0
    return LinearStateSpace(A, B, c, float(dff))


def as_linear(model: SupplyModel) -> SupplyModel:
    """Return the model in a form the simulator can integrate."""
    if isinstance(model, TransferFunction):
        return realize_transfer_function(model)
    return model


# --- passivity -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PassivityCertificate:
    epsilon: float
    freq_grid: np.ndarray
    min_real_part: float
    argmin_frequency: float
    verdict: str
    validity_note: str = LOCAL_VALIDITY_NOTE

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    @property
    def margin(self) -> float:
        return self.min_real_part - self.epsilon


def check_passivity(
    model: SupplyModel, epsilon: float = 0.0, freq_grid: Optional[np.ndarray] = None
) -> PassivityCertificate:
    """Sampled positive-realness test of ``S(jw) - epsilon`` on a frequency grid.

    This is a necessary check on the grid, not a proof: the verdict is only
    as good as the grid resolution, which is recorded in the certificate.
    """
    if not model.is_linear:
        raise NonlinearModelUnsupported(f"{type(model).__name__}: only linear supplies can be certified")
    grid = DEFAULT_GRID if freq_grid is None else np.asarray(freq_grid, dtype=float).reshape(-1)
    if grid.size == 0:
        raise EmptyGrid("frequency grid is empty")
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise EmptyGrid("frequency grid must be positive and strictly increasing")
    re = model.frequency_response(grid).real
    k = int(np.argmin(re))
    min_re = float(re[k])
    return PassivityCertificate(
        epsilon=float(epsilon),
        freq_grid=grid,
        min_real_part=min_re,
        argmin_frequency=float(grid[k]),
        verdict="pass" if min_re >= epsilon else "fail",
    )


def gain_margin(model: SupplyModel) -> float:
    """Slack of the closed-form gain condition; positive when it holds strictly."""
    if isinstance(model, PILag):
        return model.D + model.K_tilde - model.K * model.tau_beta
    if isinstance(model, PISecondOrder):
        return model.D - model.K * (model.tau_beta + model.tau_gamma)
    raise UnsupportedVariant(f"no closed-form gain condition for {type(model).__name__}")


def gain_condition(model: SupplyModel) -> bool:
    """Closed-form sufficient passivity conditions for the two PI variants."""
    return gain_margin(model) > 0.0


@dataclass(frozen=True, eq=False)
class StorageFunction:
    """Quadratic storage ``(x - x_star)' P (x - x_star)``."""

    P: np.ndarray
    x_star: np.ndarray
    epsilon: float = 0.0

    def value(self, x: np.ndarray) -> np.ndarray:
        """Storage at one state (1-D) or at a stack of states (2-D, one per row)."""
        dx = np.asarray(x, dtype=float) - self.x_star
        if self.P.size == 0:
            return np.zeros(dx.shape[:-1]) if dx.ndim > 1 else 0.0
        return np.einsum("...i,ij,...j->...", dx, self.P, dx)

    def with_shift(self, x_star: np.ndarray) -> "StorageFunction":
        return StorageFunction(self.P, np.asarray(x_star, dtype=float), self.epsilon)


def dissipation_gap(
    model: SupplyModel, P: np.ndarray, epsilon: float, x: np.ndarray, u: np.ndarray
) -> np.ndarray:
    """``d/dt(x'Px) - (u y - eps u^2)`` for stacked samples; nonpositive when dissipative."""
    A, B, C, D = model.state_space()
    x = np.atleast_2d(x)
    u = np.asarray(u, dtype=float).reshape(-1)
    xdot = x @ A.T + np.outer(u, B)
    y = x @ C + D * u
    vdot = 2.0 * np.einsum("ki,ij,kj->k", x, P, xdot) if P.size else np.zeros(len(u))
    return vdot - (u * y - epsilon * u * u)


def _split_integrator(A, B, C):
    """Separate a simple pole at the origin from the remaining modes.

    Returns ``(T_inv, b0, c0, A1, B1, C1)`` with ``z = T_inv x`` so that the
    first coordinate integrates ``b0 u`` and contributes ``c0 z0`` to the
    output. ``b0 is None`` when A has no zero eigenvalue.
    """
    n = A.shape[0]
    eig = np.linalg.eigvals(A)
    scale = max(1.0, np.abs(eig).max(initial=0.0))
    n_zero = int(np.sum(np.abs(eig) < 1e-9 * scale))
    if n_zero == 0:
        return np.eye(n), None, None, A, B, C
    if n_zero > 1:
        raise StorageSearchFailed("more than one pole at the origin; not passive")
    v = null_space(A, rcond=1e-9)
    rng_basis = orth(A, rcond=1e-9) if n > 1 else np.zeros((n, 0))
    T = np.hstack([v, rng_basis])
    if T.shape != (n, n):
        raise StorageSearchFailed("pole at the origin is not semisimple")
    T_inv = inv(T)
    b0 = float(T_inv[0] @ B)
    c0 = float(C @ v[:, 0])
    return T_inv, b0, c0, T_inv[1:] @ A @ rng_basis, T_inv[1:] @ B, C @ rng_basis


def derive_storage(
    model: SupplyModel, epsilon: float, n_samples: int = 2000, tol: float = 1e-8, seed: int = 0
) -> StorageFunction:
    """Find a quadratic storage certifying input strict passivity with margin ``epsilon``.

    A simple integrator mode is handled separately (its storage is the
    lossless ``c0 / (2 b0) z0^2``); the remaining stable modes come from the
    stabilizing solution of the positive-real Riccati equation. The result
    is accepted only if the dissipation inequality holds on random samples.
    """
    if not model.is_linear:
        raise NonlinearModelUnsupported("storage search needs a linear model")
    A, B, C, D = model.state_space()
    n = A.shape[0]
    if D - epsilon < -1e-12:
        raise StorageSearchFailed(f"feedthrough {D} below margin {epsilon}: u^2 term is not dissipative")
    if n == 0:
        return StorageFunction(np.zeros((0, 0)), np.zeros(0), epsilon)

    T_inv, b0, c0, A1, B1, C1 = _split_integrator(A, B, C)
    m = A1.shape[0]
    r = max(D - epsilon, 1e-10)
    Pz = np.zeros((n, n))
    off = 0
    if b0 is not None:
        if not b0 * c0 > 0:
            raise StorageSearchFailed("integrator residue is not positive")
        Pz[0, 0] = c0 / (2.0 * b0)
        off = 1
    if m:
        try:
            X = solve_continuous_are(
                A1, B1.reshape(m, 1), np.zeros((m, m)), np.array([[r]]), s=C1.reshape(m, 1) / 2.0
            )
        except (LinAlgError, ValueError) as exc:
            raise StorageSearchFailed(f"Riccati equation has no stabilizing solution: {exc}") from exc
        Pz[off:, off:] = -X
    P = T_inv.T @ Pz @ T_inv
    P = 0.5 * (P + P.T)

    if np.linalg.eigvalsh(P).min() < -1e-9 * max(1.0, np.abs(P).max()):
        raise StorageSearchFailed("storage candidate is not positive semidefinite")
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-1.0, 1.0, size=(n_samples, n))
    us = rng.uniform(-1.0, 1.0, size=n_samples)
    gap = dissipation_gap(model, P, epsilon, xs, us)
    if gap.max() > tol:
        raise StorageSearchFailed(f"dissipation inequality violated by {gap.max():.3e} on samples")
    return StorageFunction(P, np.zeros(n), epsilon)
