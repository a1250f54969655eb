"""Command-line entry point.

Exit codes: 0 success, 1 scenario or model error, 2 numerical failure,
3 a ``--check`` assertion failed.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from .analysis import security_check, solve_equilibrium
from .errors import ModelError, NumericalFailure
from .output import METRIC_COLUMNS, fmt, metrics_from_csv, write_metrics_csv
from .run import certificates, run_scenario
from .scenario import build_loop, load_scenario, participation_weights, with_load_mode

MARGINAL_SLACK = 1e-9
COMPARE_MODES = ("none", "switching", "hysteresis")
COMPARE_COLUMNS = ("mode", "bus", "peak_abs_omega_rad_s", "peak_abs_freq_hz", "settling_time_s",
                   "switch_count", "min_dwell_s", "dwell_bound_s", "chatter_flag")


def _solver_overrides(args) -> dict:
    return {"dt": args.dt, "t_end": args.t_end, "mode": args.mode, "sliding": args.sliding}


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dt", type=float, help="base step in seconds")
    p.add_argument("--t-end", type=float, help="horizon in seconds")
    p.add_argument("--mode", choices=["auto", "filippov", "hybrid"])
    p.add_argument("--sliding", choices=["equivalent-control", "strict-event"])


def _table(rows: Sequence[dict], columns: Sequence[str], out=None) -> None:
    out = sys.stdout if out is None else out
    cells = [[fmt(r.get(c)) if not isinstance(r.get(c), str) else r[c] for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)), file=out)
    for row in cells:
        print("  ".join(v.ljust(w) for v, w in zip(row, widths)), file=out)


def cmd_simulate(args) -> int:
    scn = load_scenario(args.scenario)
    out_dir = Path(args.out_dir) if args.out_dir else Path("out") / scn.name
    res = run_scenario(scn, out_dir, svg=args.svg, check=args.check, **_solver_overrides(args))
    traj = res.trajectory
    print(f"scenario {scn.name}: {len(traj)} samples, {len(traj.events)} events, t_end={traj.t[-1]:.6g} s")
    if res.dissipation is not None:
        d = res.dissipation
        print(f"energy monitor ({d.mode}): max flow increase {d.max_flow_increase:.3e}, "
              f"max jump increase {d.max_jump_increase:.3e}")
    _table(res.metrics, METRIC_COLUMNS)
    print(f"wrote {res.trajectory_path}, {res.events_path}, {res.metrics_path}"
          + (f", {res.svg_path}" if res.svg_path else ""))
    if args.check:
        for msg in res.check_failures:
            print(f"CHECK FAILED: {msg}", file=sys.stderr)
        if not res.check_failures:
            print("checks passed")
    return res.exit_status


def cmd_equilibrium(args) -> int:
    scn = load_scenario(args.scenario)
    loop = build_loop(scn)
    eq = solve_equilibrium(loop, args.segment, participation_weights(scn))
    secure = security_check(eq)
    print(f"scenario {scn.name}, load segment {args.segment}")
    print(f"residual {eq.residual:.3e}")
    print("bus  omega*  s*  supply_state*")
    for j, bus in enumerate(loop.network.buses):
        xs = " ".join(fmt(v) for v in eq.x_s_star[j])
        print(f"{bus.id}  {fmt(eq.omega_star[j])}  {fmt(eq.s_star[j])}  [{xs}]")
    print("line  eta*  p*  secure")
    for e, line in enumerate(loop.network.lines):
        print(f"{line.name}  {fmt(eq.eta_star[e])}  {fmt(eq.p_star[e])}  {'yes' if secure[e] else 'no'}")
    return 0


def cmd_passivity(args) -> int:
    scn = load_scenario(args.scenario)
    loop = build_loop(scn)
    eps = scn.monitor.epsilon if args.epsilon is None else args.epsilon
    certs = certificates(loop, eps)
    cols = ("bus", "model", "epsilon", "min_real_part", "argmin_frequency", "verdict",
            "gain_condition", "restores_frequency")
    rows = []
    for bus_id, c in certs.items():
        row = {"bus": bus_id, **c}
        slack = c.get("gain_margin")
        if slack is None:
            row["gain_condition"] = "n/a"
        elif abs(slack) <= MARGINAL_SLACK:
            row["gain_condition"] = "marginal"
        else:
            row["gain_condition"] = "holds" if slack > 0 else "violated"
        row["restores_frequency"] = "yes" if c["restores_frequency"] else "no"
        rows.append(row)
    _table(rows, cols)
    print("certificates are sampled frequency sweeps with local validity only")
    return 0


def cmd_report(args) -> int:
    rows = metrics_from_csv(Path(args.trajectory), Path(args.events) if args.events else None, args.band)
    if args.out:
        write_metrics_csv(Path(args.out), rows)
    _table(rows, METRIC_COLUMNS)
    return 0


def compare_rows(scn, ratio: float = 0.15, threads: int = 1, **overrides) -> list[dict]:
    variants = [with_load_mode(scn, mode, ratio) for mode in COMPARE_MODES]

    def one(v):
        return run_scenario(v, None, **overrides).metrics

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, variants))
    else:
        results = [one(v) for v in variants]
    rows = []
    for mode, metrics in zip(COMPARE_MODES, results):
        for m in metrics:
            rows.append({"mode": mode, **m})
    return rows


def cmd_compare(args) -> int:
    scn = load_scenario(args.scenario)
    threads = max(1, int(os.environ.get("GRIDSWITCH_THREADS", "1") or 1))
    rows = compare_rows(scn, args.ratio, threads, **_solver_overrides(args))
    _table(rows, COMPARE_COLUMNS)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "compare.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COMPARE_COLUMNS)
            for r in rows:
                w.writerow([r[c] if isinstance(r[c], str) else fmt(r[c]) for c in COMPARE_COLUMNS])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridswitch", description="Frequency control with switching loads.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a scenario and write CSV results")
    s.add_argument("scenario", help="scenario file or bundled scenario name")
    _add_solver_flags(s)
    s.add_argument("--check", action="store_true", help="assert energy decrease, convergence and dwell bounds")
    s.add_argument("--svg", action="store_true", help="also write a frequency plot")
    s.add_argument("--out-dir", help="output directory (default out/<scenario name>)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("equilibrium", help="solve for the zero-frequency equilibrium")
    s.add_argument("scenario")
    s.add_argument("--segment", type=int, default=0, help="load segment (0 = before any disturbance)")
    s.set_defaults(func=cmd_equilibrium)

    s = sub.add_parser("passivity", help="per-bus passivity certificates")
    s.add_argument("scenario")
    s.add_argument("--epsilon", type=float, help="strict passivity margin")
    s.set_defaults(func=cmd_passivity)

    s = sub.add_parser("report", help="metrics from a written trajectory CSV")
    s.add_argument("trajectory")
    s.add_argument("--events", help="matching events CSV, enables chatter flags")
    s.add_argument("--band", type=float, default=1e-3, help="settling band in rad/s")
    s.add_argument("--out", help="write the metrics CSV here")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("compare", help="run with no loads, on-off loads and relay loads")
    s.add_argument("scenario")
    _add_solver_flags(s)
    s.add_argument("--ratio", type=float, default=0.15, help="inner/outer relay threshold ratio")
    s.add_argument("--out-dir", help="write compare.csv here")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ModelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


run_cli = main

if __name__ == "__main__":
    sys.exit(main())
