"""Run a scenario end to end: simulate, monitor, measure and write results."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .analysis import (
    DissipationReport,
    derive_storages,
    lyapunov_trace,
    overshoot_metrics,
    segment_equilibria,
    verify_dissipation,
)
from .errors import NonlinearModelUnsupported, UnsupportedVariant
from .output import write_events_csv, write_metrics_csv, write_omega_svg, write_trajectory_csv
from .scenario import Scenario, build_loop, initial_state, participation_weights, solver_config
from .solver import Trajectory, chattering_report, min_dwell_time, simulate
from .supply import check_passivity, gain_margin

CONVERGENCE_TOL = 1e-3


@dataclass
class RunResult:
    trajectory: Trajectory
    metrics: list[dict[str, object]]
    certificates: dict[int, dict[str, object]]
    dissipation: Optional[DissipationReport] = None
    V: Optional[np.ndarray] = None
    trajectory_path: Optional[Path] = None
    events_path: Optional[Path] = None
    metrics_path: Optional[Path] = None
    svg_path: Optional[Path] = None
    check_failures: list[str] = field(default_factory=list)

    @property
    def exit_status(self) -> int:
        return 3 if self.check_failures else 0


def certificates(loop, epsilon: float = 0.0) -> dict[int, dict[str, object]]:
    """Per-bus passivity certificate summary (linear supplies only)."""
    out = {}
    for bus, model in zip(loop.network.buses, loop.supplies):
        entry: dict[str, object] = {"model": type(bus.supply).__name__,
                                    "restores_frequency": bool(model.restores_frequency)}
        try:
            cert = check_passivity(model, epsilon)
            entry.update(verdict=cert.verdict, min_real_part=cert.min_real_part,
                         argmin_frequency=cert.argmin_frequency, epsilon=cert.epsilon)
        except NonlinearModelUnsupported:
            entry.update(verdict="unsupported")
        try:
            slack = gain_margin(bus.supply)
            entry["gain_margin"] = slack
            entry["gain_condition"] = slack > 0.0
        except UnsupportedVariant:
            entry["gain_condition"] = entry["gain_margin"] = None
        out[bus.id] = entry
    return out


def metric_rows(traj: Trajectory, band: float) -> list[dict[str, object]]:
    over = overshoot_metrics(traj, band)
    dwell = min_dwell_time(traj)
    chat = chattering_report(traj)
    rows = []
    for bus in traj.loop.network.buses:
        m = over[bus.id]
        d = dwell.get(bus.id)
        c = chat.get(bus.id)
        rows.append({
            "bus": bus.id,
            "peak_abs_omega_rad_s": m.peak_abs_omega,
            "peak_abs_freq_hz": m.peak_abs_freq_hz,
            "settling_time_s": m.settling_time,
            "loads_off_time_s": m.loads_off_time,
            "switch_count": m.switch_count,
            "min_dwell_s": d.min_gap if d else None,
            "dwell_bound_s": d.bound if d else None,
            "chatter_flag": c.flag if c else None,
        })
    return rows


def run_scenario(
    scn: Scenario,
    out_dir: Optional[Path] = None,
    svg: bool = False,
    check: bool = False,
    **overrides,
) -> RunResult:
    """Simulate a scenario and gather certificates, energy monitoring and metrics.

    ``overrides`` replace solver settings (dt, t_end, mode, sliding, ...).
    Numerical failures propagate as exceptions.
    """
    loop = build_loop(scn)
    cfg = solver_config(scn, **overrides)
    traj = simulate(loop, cfg, initial_state(scn, loop))
    mon = scn.monitor

    report, V = None, None
    if mon.lyapunov:
        eqs = segment_equilibria(traj, participation_weights(scn))
        storages = derive_storages(loop, mon.epsilon)
        full = all(s is not None or o == 0 for s, o in zip(storages, loop.orders))
        V = lyapunov_trace(traj, eqs, storages if full else None).total
        report = verify_dissipation(traj, eqs, storages)

    result = RunResult(traj, metric_rows(traj, mon.settle_band), certificates(loop, mon.epsilon), report, V)

    if check:
        if report is not None and not report.passed:
            result.check_failures.append(
                f"energy function increased: flow {report.max_flow_increase:.3e} "
                f"({report.n_flow_violations} steps), jump {report.max_jump_increase:.3e}"
            )
        if mon.assert_convergence:
            worst = float(np.abs(traj.omega[-1]).max(initial=0.0))
            if worst > CONVERGENCE_TOL:
                result.check_failures.append(f"terminal |omega| = {worst:.3e} exceeds {CONVERGENCE_TOL}")
        for bus_id, d in min_dwell_time(traj).items():
            if not d.satisfied:
                result.check_failures.append(
                    f"bus {bus_id}: dwell {d.min_gap:.6g} s below bound {d.bound:.6g} s"
                )

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.trajectory_path = write_trajectory_csv(out / "trajectory.csv", traj, mon.output_dt, V)
        result.events_path = write_events_csv(out / "events.csv", traj)
        result.metrics_path = write_metrics_csv(out / "metrics.csv", result.metrics)
        if svg:
            result.svg_path = write_omega_svg(out / "omega.svg", traj, mon.output_dt, scn.name)
    return result
