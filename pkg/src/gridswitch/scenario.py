"""Scenario files: YAML documents validated against a closed schema.

A scenario lists the network, one supply model per bus, optional
controllable loads, load-step disturbances, solver settings and monitor
flags. Parsing reports YAML syntax problems with their line and column,
schema violations with the offending key path (and line when it can be
found), and semantic problems such as a disconnected network.
"""

from __future__ import annotations

import math
from importlib import resources
from pathlib import Path
from typing import Annotated, Any, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ModelError, ScenarioSyntaxError, SchemaError, SemanticError
from .loads import HystereticLoad, SwitchingLoad
from .network import Bus, build_network
from .solver import ClosedLoop, Disturbance, HybridState, SolverConfig
from .supply import (
    LinearStateSpace,
    PILag,
    PISecondOrder,
    StaticDamping,
    TransferFunction,
    governor_transfer_function,
)

PositiveFloat = Annotated[float, Field(gt=0, allow_inf_nan=False)]
NonNegFloat = Annotated[float, Field(ge=0, allow_inf_nan=False)]
Finite = Annotated[float, Field(allow_inf_nan=False)]


class _Closed(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)


# --- network ---------------------------------------------------------------------

class BusSpec(_Closed):
    id: int
    inertia: PositiveFloat
    base_load: Finite = 0.0


class LineSpec(_Closed):
    from_: int = Field(alias="from")
    to: int
    susceptance: PositiveFloat


class NetworkSpec(_Closed):
    buses: list[BusSpec] = Field(min_length=1)
    lines: list[LineSpec] = []


# --- supplies --------------------------------------------------------------------

class StaticDampingSpec(_Closed):
    type: Literal["static_damping"]
    bus: int
    D: PositiveFloat


class PILagSpec(_Closed):
    type: Literal["pi_lag"]
    bus: int
    K: PositiveFloat
    D: PositiveFloat
    tau_beta: PositiveFloat
    K_tilde: NonNegFloat = 0.0


class PISecondOrderSpec(_Closed):
    type: Literal["pi_second_order"]
    bus: int
    K: PositiveFloat
    D: PositiveFloat
    tau_beta: PositiveFloat
    tau_gamma: PositiveFloat


class StateSpaceSpec(_Closed):
    type: Literal["state_space"]
    bus: int
    A: list[list[Finite]]
    B: list[Finite]
    C: list[Finite]
    Dff: Finite = 0.0


class TransferFunctionSpec(_Closed):
    type: Literal["transfer_function"]
    bus: int
    num: list[Finite] = Field(min_length=1)
    den: list[Finite] = Field(min_length=1)
    integrator: bool = False


class GovernorSpec(_Closed):
    type: Literal["governor"]
    bus: int
    K: PositiveFloat = 25.0
    D: PositiveFloat = 1.0
    T_s: PositiveFloat = 0.04
    T_3: PositiveFloat = 0.25
    T_c: PositiveFloat = 0.4
    T_4: PositiveFloat = 0.3
    T_5: PositiveFloat = 8.0


SupplySpec = Annotated[
    Union[StaticDampingSpec, PILagSpec, PISecondOrderSpec, StateSpaceSpec, TransferFunctionSpec, GovernorSpec],
    Field(discriminator="type"),
]


# --- loads -----------------------------------------------------------------------

class NoLoadSpec(_Closed):
    type: Literal["none"]
    bus: int


class SwitchingSpec(_Closed):
    type: Literal["switching"]
    bus: int
    d_up: NonNegFloat
    d_down: Annotated[float, Field(le=0, allow_inf_nan=False)]
    omega_up: PositiveFloat
    omega_down: Annotated[float, Field(lt=0, allow_inf_nan=False)]


class HysteresisSpec(_Closed):
    type: Literal["hysteresis"]
    bus: int
    d_up: NonNegFloat
    omega1: PositiveFloat
    omega0: PositiveFloat
    sigma0: Literal[-1, 0, 1] = 0

    @model_validator(mode="after")
    def _ordered(self):
        if not self.omega1 > self.omega0:
            raise ValueError(f"need omega1 > omega0 > 0, got omega1={self.omega1}, omega0={self.omega0}")
        return self


LoadSpec = Annotated[Union[NoLoadSpec, SwitchingSpec, HysteresisSpec], Field(discriminator="type")]


# --- rest ------------------------------------------------------------------------

class DisturbanceSpec(_Closed):
    bus: int
    time: NonNegFloat
    magnitude: Finite


class SolverSpec(_Closed):
    dt: PositiveFloat = 1e-3
    t_end: PositiveFloat = 60.0
    event_tol: PositiveFloat = 1e-9
    mode: Literal["auto", "filippov", "hybrid"] = "auto"
    sliding: Literal["equivalent-control", "strict-event"] = "equivalent-control"
    chatter_window: PositiveFloat = 1.0
    chatter_count: Annotated[int, Field(ge=0)] = 50


class MonitorSpec(_Closed):
    lyapunov: bool = True
    assert_convergence: bool = True
    threshold_units: Optional[Literal["hz", "rad_s"]] = None
    epsilon: NonNegFloat = 0.0
    settle_band: PositiveFloat = 1e-3
    output_dt: PositiveFloat = 0.01


class Scenario(_Closed):
    name: str
    base_mva: PositiveFloat = 100.0
    network: NetworkSpec
    supplies: list[SupplySpec]
    loads: list[LoadSpec] = []
    disturbances: list[DisturbanceSpec] = []
    solver: SolverSpec = SolverSpec()
    monitor: MonitorSpec = MonitorSpec()
    initial: Literal["equilibrium", "zero"] = "equilibrium"
    participation: Optional[dict[int, NonNegFloat]] = None

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.network.buses]


# --- parsing -----------------------------------------------------------------------

def _locate(text: str, loc: tuple) -> Optional[tuple[int, int]]:
    """Line and column (1-based) of the node at a validation error path."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError:
        return None
    best = node
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == str(key):
                    nxt = (k, v)
                    break
            if nxt is None:
                break
            best, node = nxt[0], nxt[1]
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            best = node
        else:
            continue
    if best is None:
        return None
    return best.start_mark.line + 1, best.start_mark.column + 1


def _semantic_checks(scn: Scenario) -> None:
    ids = scn.bus_ids
    known = set(ids)
    sup_buses = [s.bus for s in scn.supplies]
    for b in sup_buses:
        if b not in known:
            raise SemanticError(f"supply references unknown bus {b}")
    missing = [b for b in ids if b not in sup_buses]
    if missing:
        raise SemanticError(f"buses without a supply model: {missing}")
    dup = sorted({b for b in sup_buses if sup_buses.count(b) > 1})
    if dup:
        raise SemanticError(f"buses with more than one supply model: {dup}")
    load_buses = [ld.bus for ld in scn.loads]
    for b in load_buses:
        if b not in known:
            raise SemanticError(f"load references unknown bus {b}")
    dup = sorted({b for b in load_buses if load_buses.count(b) > 1})
    if dup:
        raise SemanticError(f"buses with more than one load: {dup}")
    for d in scn.disturbances:
        if d.bus not in known:
            raise SemanticError(f"disturbance references unknown bus {d.bus}")
    if scn.participation:
        for b in scn.participation:
            if b not in known:
                raise SemanticError(f"participation references unknown bus {b}")
    if any(ld.type != "none" for ld in scn.loads) and scn.monitor.threshold_units is None:
        raise SemanticError("monitor.threshold_units must be declared (hz or rad_s) when loads are present")


def parse_scenario(text: str) -> Scenario:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ScenarioSyntaxError(f"invalid YAML{where}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(data, dict):
        raise SchemaError("scenario document must be a mapping")
    try:
        scn = Scenario.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = tuple(err["loc"])
        path = ".".join(str(p) for p in loc)
        pos = _locate(text, loc)
        where = f" (line {pos[0]}, column {pos[1]})" if pos else ""
        raise SchemaError(f"{path or '<root>'}: {err['msg']}{where}") from exc
    _semantic_checks(scn)
    try:
        build_loop(scn)
    except SemanticError:
        raise
    except ModelError as exc:
        raise SemanticError(str(exc)) from exc
    if scn.monitor.lyapunov or scn.monitor.assert_convergence:
        loop = build_loop(scn)
        if not any(s.restores_frequency for s in loop.supplies):
            raise SemanticError(
                "convergence checks need at least one bus with integral action; "
                "disable monitor.lyapunov and monitor.assert_convergence otherwise"
            )
    return scn


def load_scenario(path: Union[str, Path]) -> Scenario:
    """Read a scenario from a path, or from the bundled set by name."""
    p = Path(path)
    if p.is_file():
        return parse_scenario(p.read_text())
    name = p.name if p.suffix == ".scn" else f"{p.name}.scn"
    res = resources.files("gridswitch") / "scenarios" / name
    if res.is_file():
        return parse_scenario(res.read_text())
    raise SemanticError(f"no scenario file {path!s} and no bundled scenario named {p.stem!r}")


def bundled_scenarios() -> list[str]:
    root = resources.files("gridswitch") / "scenarios"
    return sorted(f.name[:-4] for f in root.iterdir() if f.name.endswith(".scn"))


def scenario_to_dict(scn: Scenario) -> dict[str, Any]:
    return scn.model_dump(mode="json", by_alias=True)


def serialize_scenario(scn: Scenario) -> str:
    return yaml.safe_dump(scenario_to_dict(scn), sort_keys=False)


# --- model construction ---------------------------------------------------------------

def _supply_model(spec):
    if spec.type == "static_damping":
        return StaticDamping(spec.D)
    if spec.type == "pi_lag":
        return PILag(spec.K, spec.D, spec.tau_beta, spec.K_tilde)
    if spec.type == "pi_second_order":
        return PISecondOrder(spec.K, spec.D, spec.tau_beta, spec.tau_gamma)
    if spec.type == "state_space":
        A = np.array(spec.A, dtype=float) if spec.A else np.zeros((0, 0))
        return LinearStateSpace(A, spec.B, spec.C, spec.Dff)
    if spec.type == "transfer_function":
        return TransferFunction(tuple(spec.num), tuple(spec.den), spec.integrator)
    return governor_transfer_function(spec.K, spec.D, spec.T_s, spec.T_3, spec.T_c, spec.T_4, spec.T_5)


def _load_model(spec, scale: float):
    if spec.type == "switching":
        return SwitchingLoad(spec.d_up, spec.d_down, spec.omega_up * scale, spec.omega_down * scale)
    if spec.type == "hysteresis":
        return HystereticLoad(spec.d_up, spec.omega1 * scale, spec.omega0 * scale, spec.sigma0)
    return None


def threshold_scale(scn: Scenario) -> float:
    """Factor converting declared threshold units to rad/s."""
    return 2.0 * math.pi if scn.monitor.threshold_units == "hz" else 1.0


def build_loop(scn: Scenario) -> ClosedLoop:
    supplies = {s.bus: s for s in scn.supplies}
    loads = {ld.bus: ld for ld in scn.loads}
    scale = threshold_scale(scn)
    buses = []
    for b in scn.network.buses:
        if b.id not in supplies:
            raise SemanticError(f"bus {b.id} has no supply model")
        load = _load_model(loads[b.id], scale) if b.id in loads else None
        buses.append(Bus(b.id, b.inertia, b.base_load, _supply_model(supplies[b.id]), load))
    net = build_network({
        "buses": buses,
        "lines": [{"from": ln.from_, "to": ln.to, "susceptance": ln.susceptance} for ln in scn.network.lines],
    })
    dist = tuple(Disturbance(d.bus, d.time, d.magnitude) for d in scn.disturbances)
    return ClosedLoop(net, dist)


def solver_config(scn: Scenario, **overrides) -> SolverConfig:
    s = scn.solver
    kw = dict(dt=s.dt, t_end=s.t_end, event_tol=s.event_tol, mode=s.mode, sliding=s.sliding,
              chatter_window=s.chatter_window, chatter_count=s.chatter_count)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return SolverConfig(**kw)


def participation_weights(scn: Scenario) -> Optional[np.ndarray]:
    if not scn.participation:
        return None
    return np.array([scn.participation.get(b, 0.0) for b in scn.bus_ids])


def initial_state(scn: Scenario, loop: ClosedLoop) -> HybridState:
    from .analysis import solve_equilibrium

    sigma = np.zeros(loop.n, dtype=np.int64)
    for j, load in enumerate(loop.loads):
        if isinstance(load, HystereticLoad):
            sigma[j] = load.sigma
    if scn.initial == "zero":
        cs = loop.unflatten(np.zeros(loop.nx))
    else:
        eq = solve_equilibrium(loop, 0, participation_weights(scn))
        cs = loop.unflatten(eq.flatten())
    return HybridState(0.0, 0, cs, sigma)


def with_load_mode(scn: Scenario, mode: str, ratio: float = 0.15) -> Scenario:
    """Same scenario with every controllable load replaced by the given policy.

    Switching loads become symmetric relays with the upper threshold as the
    outer threshold and ``ratio`` times it as the inner one; relays become
    symmetric on-off loads at their outer threshold.
    """
    if mode not in ("none", "switching", "hysteresis"):
        raise ValueError(f"unknown load mode {mode!r}")
    new = []
    for ld in scn.loads:
        if ld.type == "none":
            new.append(ld)
            continue
        if mode == "none":
            new.append(NoLoadSpec(type="none", bus=ld.bus))
            continue
        if ld.type == "switching":
            w1, d = ld.omega_up, ld.d_up
        else:
            w1, d = ld.omega1, ld.d_up
        if mode == "switching":
            new.append(SwitchingSpec(type="switching", bus=ld.bus, d_up=d, d_down=-d, omega_up=w1, omega_down=-w1)
                       if ld.type != "switching" else ld)
        else:
            new.append(HysteresisSpec(type="hysteresis", bus=ld.bus, d_up=d, omega1=w1, omega0=ratio * w1)
                       if ld.type != "hysteresis" else ld)
    solver = scn.solver.model_copy(update={"mode": "auto"})
    return scn.model_copy(update={"loads": new, "solver": solver})
