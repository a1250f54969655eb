"""Network graph and swing dynamics in angle-difference coordinates.

The state carries one angle difference per line rather than one phase per
bus, which removes the rotational null direction of the phase coordinates.
Line orientation is arbitrary but unique.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import (
    DanglingReference,
    DimensionMismatch,
    DisconnectedGraph,
    DuplicateLine,
    ModelError,
    NonPositiveParameter,
)


@dataclass(frozen=True)
class Bus:
    id: int
    inertia: float
    base_load: float = 0.0
    supply: Any = None
    load: Any = None

    def __post_init__(self):
        if not self.inertia > 0:
            raise NonPositiveParameter(f"bus {self.id}: inertia must be > 0, got {self.inertia}")


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    susceptance: float

    def __post_init__(self):
        if not self.susceptance > 0:
            raise NonPositiveParameter(
                f"line ({self.from_bus},{self.to_bus}): susceptance must be > 0, got {self.susceptance}"
            )

    @property
    def name(self) -> str:
        return f"{self.from_bus}_{self.to_bus}"


@dataclass(frozen=True, eq=False)
class Network:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...] = ()

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_lines(self) -> int:
        return len(self.lines)

    @cached_property
    def index(self) -> dict[int, int]:
        """Map bus id to its position in the state vectors."""
        return {bus.id: k for k, bus in enumerate(self.buses)}

    @cached_property
    def incidence(self) -> np.ndarray:
        """Node-line incidence: +1 at the sending bus, -1 at the receiving bus."""
        inc = np.zeros((self.n_buses, self.n_lines))
        for e, line in enumerate(self.lines):
            inc[self.index[line.from_bus], e] = 1.0
            inc[self.index[line.to_bus], e] = -1.0
        return inc

    @cached_property
    def susceptances(self) -> np.ndarray:
        return np.array([line.susceptance for line in self.lines], dtype=float)

    @cached_property
    def inertias(self) -> np.ndarray:
        return np.array([bus.inertia for bus in self.buses], dtype=float)

    @cached_property
    def base_loads(self) -> np.ndarray:
        return np.array([bus.base_load for bus in self.buses], dtype=float)

    @cached_property
    def cycle_basis(self) -> np.ndarray:
        """Orthonormal basis of the kernel of the incidence matrix (loop flows)."""
        from scipy.linalg import null_space

        if self.n_lines == 0:
            return np.zeros((0, 0))
        return null_space(self.incidence)

    def replace_buses(self, buses: Sequence[Bus]) -> "Network":
        return Network(tuple(buses), self.lines)


@dataclass(frozen=True)
class ContinuousState:
    eta: np.ndarray
    omega: np.ndarray
    x_s: tuple[np.ndarray, ...] = field(default_factory=tuple)

    def flatten(self) -> np.ndarray:
        parts = [np.asarray(self.eta, float), np.asarray(self.omega, float)]
        parts += [np.asarray(x, float).ravel() for x in self.x_s]
        return np.concatenate(parts) if parts else np.zeros(0)

    @classmethod
    def unflatten(cls, x: np.ndarray, n_lines: int, orders: Sequence[int]) -> "ContinuousState":
        n = len(orders)
        eta = x[:n_lines].copy()
        omega = x[n_lines:n_lines + n].copy()
        parts, k = [], n_lines + n
        for order in orders:
            parts.append(x[k:k + order].copy())
            k += order
        return cls(eta, omega, tuple(parts))


def build_network(spec: Mapping[str, Any]) -> Network:
    """Build and validate a network from a parsed ``network`` section.

    ``spec["buses"]`` holds mappings with ``id``, ``inertia`` and optional
    ``base_load``; ``spec["lines"]`` holds mappings with ``from``, ``to`` and
    ``susceptance``. Bus objects may be passed directly instead of mappings.
    """
    raw_buses = list(spec.get("buses", ()))
    if not raw_buses:
        raise DimensionMismatch("network needs at least one bus")
    buses = []
    for b in raw_buses:
        if isinstance(b, Bus):
            buses.append(b)
        else:
            buses.append(Bus(int(b["id"]), float(b["inertia"]), float(b.get("base_load", 0.0))))
    ids = [b.id for b in buses]
    if len(set(ids)) != len(ids):
        raise ModelError(f"duplicate bus ids in {ids}")

    lines = []
    seen: set[tuple[int, int]] = set()
    for ln in spec.get("lines", ()):
        if isinstance(ln, Line):
            line = ln
        else:
            line = Line(int(ln["from"]), int(ln["to"]), float(ln["susceptance"]))
        for end in (line.from_bus, line.to_bus):
            if end not in ids:
                raise DanglingReference(f"line ({line.from_bus},{line.to_bus}) references unknown bus {end}")
        if line.from_bus == line.to_bus:
            raise DanglingReference(f"line ({line.from_bus},{line.to_bus}) is a self loop")
        key = (line.from_bus, line.to_bus)
        if key in seen or key[::-1] in seen:
            raise DuplicateLine(f"line {key} appears more than once (in either orientation)")
        seen.add(key)
        lines.append(line)

    net = Network(tuple(buses), tuple(lines))
    if net.n_buses > 1:
        adj = csr_matrix(np.abs(net.incidence) @ np.abs(net.incidence).T)
        n_comp, _ = connected_components(adj, directed=False)
        if n_comp > 1:
            raise DisconnectedGraph(f"network has {n_comp} connected components")
    return net


def line_flows(network: Network, eta: np.ndarray) -> np.ndarray:
    """Power carried by each line from its sending to its receiving bus."""
    return network.susceptances * np.sin(np.asarray(eta, dtype=float))


def swing_rhs(
    network: Network,
    state: ContinuousState,
    s: np.ndarray,
    d_c: np.ndarray,
    p_load: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Time derivatives of the angle differences and bus frequencies.

    ``p_load`` defaults to the buses' base loads.
    """
    eta = np.asarray(state.eta, dtype=float)
    omega = np.asarray(state.omega, dtype=float)
    s = np.asarray(s, dtype=float)
    d_c = np.asarray(d_c, dtype=float)
    n, m = network.n_buses, network.n_lines
    if eta.shape != (m,) or omega.shape != (n,) or s.shape != (n,) or d_c.shape != (n,):
        raise DimensionMismatch(
            f"expected eta[{m}], omega/s/d_c[{n}]; got {eta.shape}, {omega.shape}, {s.shape}, {d_c.shape}"
        )
    p_load = network.base_loads if p_load is None else np.asarray(p_load, dtype=float)
    inc = network.incidence
    eta_dot = inc.T @ omega
    # outgoing flows leave with +1, incoming arrive with -1 in the incidence
    omega_dot = (-p_load + s - d_c - inc @ line_flows(network, eta)) / network.inertias
    return eta_dot, omega_dot
