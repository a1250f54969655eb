"""Controllable demand: on-off switching, its set-valued relaxation, and relay hysteresis.

All thresholds are in rad/s; scenario parsing converts from Hz when declared.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NonPositiveParameter, NotInJumpSet


@dataclass(frozen=True)
class SwitchingLoad:
    d_up: float
    d_down: float
    omega_up: float
    omega_down: float

    def __post_init__(self):
        if not (np.isfinite(self.d_up) and np.isfinite(self.d_down)):
            raise NonPositiveParameter("load magnitudes must be finite")
        if not self.d_down <= 0.0 <= self.d_up:
            raise NonPositiveParameter(f"need d_down <= 0 <= d_up, got {self.d_down}, {self.d_up}")
        if not self.omega_down < 0.0 < self.omega_up:
            raise NonPositiveParameter(
                f"need omega_down < 0 < omega_up, got {self.omega_down}, {self.omega_up}"
            )


@dataclass(frozen=True)
class HystereticLoad:
    d_up: float
    omega1: float
    omega0: float
    sigma: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.d_up) and self.d_up >= 0.0):
            raise NonPositiveParameter(f"d_up must be finite and >= 0, got {self.d_up}")
        if not self.omega1 > self.omega0 > 0.0:
            raise NonPositiveParameter(f"need omega1 > omega0 > 0, got {self.omega1}, {self.omega0}")
        if self.sigma not in (-1, 0, 1):
            raise NonPositiveParameter(f"sigma must be -1, 0 or 1, got {self.sigma}")

    @property
    def width(self) -> float:
        """Hysteresis band width omega1 - omega0."""
        return self.omega1 - self.omega0


@dataclass(frozen=True)
class FilippovInterval:
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    def __contains__(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    @property
    def is_point(self) -> bool:
        return self.lo == self.hi


def _sgn(omega: float) -> int:
    # zero maps to +1 so that the set {0, sgn w} stays two-valued
    return -1 if omega < 0 else 1


def switching_demand(load: SwitchingLoad, omega: float) -> float:
    if omega > load.omega_up:
        return load.d_up
    if omega > load.omega_down:
        return 0.0
    return load.d_down


def filippov_demand(load: SwitchingLoad, omega: float) -> FilippovInterval:
    if omega == load.omega_up:
        return FilippovInterval(0.0, load.d_up)
    if omega == load.omega_down:
        return FilippovInterval(load.d_down, 0.0)
    v = switching_demand(load, omega)
    return FilippovInterval(v, v)


def hysteresis_flow_set(load: HystereticLoad, omega: float) -> frozenset[int]:
    a = abs(omega)
    if a > load.omega1:
        return frozenset({_sgn(omega)})
    if a < load.omega0:
        return frozenset({0})
    return frozenset({0, _sgn(omega)})


def hysteresis_jump_set(load: HystereticLoad, omega: float, sigma: int, tol: float = 0.0) -> bool:
    """Membership in the jump set; ``tol`` absorbs event-localization error."""
    a = abs(omega)
    if sigma == 0 and abs(a - load.omega1) <= tol:
        return True
    return sigma != 0 and sigma == _sgn(omega) and abs(a - load.omega0) <= tol


def hysteresis_jump(load: HystereticLoad, omega: float, sigma: Optional[int] = None, tol: float = 0.0) -> int:
    """Discrete update at a jump; the continuous state is left untouched by the caller.

    When ``sigma`` is given the jump-set membership is checked first.
    """
    if sigma is not None and not hysteresis_jump_set(load, omega, sigma, tol):
        raise NotInJumpSet(f"(omega={omega}, sigma={sigma}) is not in the jump set")
    a = abs(omega)
    if abs(a - load.omega1) <= tol and (sigma is None or sigma == 0):
        return _sgn(omega)
    if abs(a - load.omega0) <= tol:
        return 0
    raise NotInJumpSet(f"|omega|={a} is at neither threshold")


def hysteretic_demand(load: HystereticLoad, sigma: Optional[int] = None) -> float:
    """Demand ``d_up * sigma``; defaults to the load's own discrete state."""
    return load.d_up * (load.sigma if sigma is None else sigma)
