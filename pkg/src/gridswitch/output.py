"""CSV and SVG emission for trajectories, events and per-bus metrics."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from .solver import KIND_HYSTERESIS, Trajectory

METRIC_COLUMNS = (
    "bus",
    "peak_abs_omega_rad_s",
    "peak_abs_freq_hz",
    "settling_time_s",
    "loads_off_time_s",
    "switch_count",
    "min_dwell_s",
    "dwell_bound_s",
    "chatter_flag",
)


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.12g}"


def output_indices(traj: Trajectory, output_dt: float) -> np.ndarray:
    """Samples on the output grid plus every event sample and both ends."""
    ratio = traj.t / output_dt
    on_grid = np.abs(ratio - np.round(ratio)) <= 1e-6
    keep = on_grid | traj.is_event
    if len(keep):
        keep[0] = keep[-1] = True
    return np.nonzero(keep)[0]


def trajectory_header(traj: Trajectory, with_v: bool) -> list[str]:
    net = traj.loop.network
    cols = ["t", "ell"]
    cols += [f"omega_{b.id}" for b in net.buses]
    cols += [f"eta_{ln.name}" for ln in net.lines]
    cols += [f"d_c_{b.id}" for b in net.buses]
    cols += [f"sigma_{b.id}" for j, b in enumerate(net.buses) if traj.kind[j] == KIND_HYSTERESIS]
    if with_v:
        cols.append("V")
    return cols


def write_trajectory_csv(
    path: Path, traj: Trajectory, output_dt: float, V: Optional[np.ndarray] = None
) -> Path:
    idx = output_indices(traj, output_dt)
    hyst = [j for j in range(traj.loop.n) if traj.kind[j] == KIND_HYSTERESIS]
    omega, eta, demand, sigma = traj.omega, traj.eta, traj.demand, traj.sigma
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trajectory_header(traj, V is not None))
        for k in idx:
            row = [fmt(traj.t[k]), str(int(traj.ell[k]))]
            row += [fmt(v) for v in omega[k]]
            row += [fmt(v) for v in eta[k]]
            row += [fmt(v) for v in demand[k]]
            row += [str(int(sigma[k, j])) for j in hyst]
            if V is not None:
                row.append(fmt(V[k]))
            w.writerow(row)
    return Path(path)


def write_events_csv(path: Path, traj: Trajectory) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "ell", "bus", "kind"])
        for e in traj.events:
            w.writerow([fmt(e.t), str(e.ell), str(e.bus), e.kind])
    return Path(path)


def write_metrics_csv(path: Path, rows: Iterable[Mapping[str, object]]) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in METRIC_COLUMNS])
    return Path(path)


def write_omega_svg(path: Path, traj: Trajectory, output_dt: float, title: str = "") -> Path:
    """Static line plot of every bus frequency deviation in Hz."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    idx = output_indices(traj, output_dt)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    hz = traj.omega[idx] / (2 * np.pi)
    for j, bus in enumerate(traj.loop.network.buses):
        ax.plot(traj.t[idx], hz[:, j], lw=1.0, label=f"bus {bus.id}")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("frequency deviation (Hz)")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, ncol=3)
    fig.tight_layout()
    # a fixed hash salt and no date keep the file reproducible
    matplotlib.rcParams["svg.hashsalt"] = "gridswitch"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)


# --- post-processing of written files ------------------------------------------------

def read_csv_columns(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    cols: dict[str, np.ndarray] = {}
    for i, name in enumerate(header):
        vals = [r[i] for r in body]
        try:
            cols[name] = np.array([float(v) for v in vals])
        except ValueError:
            cols[name] = np.array(vals, dtype=object)
    return cols


def metrics_from_csv(
    traj_csv: Path, events_csv: Optional[Path] = None, band: float = 1e-3,
    chatter_window: float = 1.0, chatter_count: int = 50,
) -> list[dict[str, object]]:
    """Per-bus metrics recomputed from a written trajectory (and optionally its events).

    Relay switch times are read from the event samples, which are always
    written. The dwell bound needs the load thresholds, which the file does
    not carry, and is left empty.
    """
    cols = read_csv_columns(traj_csv)
    t = cols["t"]
    events = read_csv_columns(events_csv) if events_csv else None
    buses = [name[len("omega_"):] for name in cols if name.startswith("omega_")]
    rows = []
    for b in buses:
        w = np.abs(cols[f"omega_{b}"])
        peak = float(w.max(initial=0.0))
        out = np.nonzero(w > band)[0]
        if out.size == 0:
            settle = 0.0
        elif out[-1] == len(t) - 1:
            settle = math.inf
        else:
            settle = float(t[out[-1] + 1])
        d = cols.get(f"d_c_{b}")
        sig = cols.get(f"sigma_{b}")
        code = None
        if sig is not None:
            code = sig
        elif d is not None and np.any(d != 0):
            code = np.sign(d)
        off_time, count = None, 0
        min_dwell = bound = None
        chatter = None
        if code is not None:
            change = np.nonzero(code[1:] != code[:-1])[0] + 1
            count = int(change.size)
            to_zero = change[code[change] == 0]
            off_time = float(t[to_zero[-1]]) if to_zero.size else 0.0
            if code[-1] != 0:
                off_time = math.inf
        if sig is not None:
            times = t[np.nonzero(sig[1:] != sig[:-1])[0] + 1]
            if times.size >= 2:
                min_dwell = float(np.min(np.diff(times)))
        if events is not None:
            mine = events["bus"] == float(b)
            kinds = events["kind"][mine]
            times = events["t"][mine]
            sw = times[np.isin(kinds, ["filippov-cross", "jump-on", "jump-off", "sliding-enter"])]
            best = 0
            if sw.size:
                ends = np.searchsorted(sw, sw + chatter_window, side="right")
                best = int(np.max(ends - np.arange(sw.size)))
            chatter = bool(np.any(kinds == "sliding-enter") or best > chatter_count)
        rows.append({
            "bus": int(float(b)) if b.lstrip("-").isdigit() else b,
            "peak_abs_omega_rad_s": peak,
            "peak_abs_freq_hz": peak / (2 * math.pi),
            "settling_time_s": settle,
            "loads_off_time_s": off_time,
            "switch_count": count,
            "min_dwell_s": min_dwell,
            "dwell_bound_s": bound,
            "chatter_flag": chatter,
        })
    return rows
