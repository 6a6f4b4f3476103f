"""Command-line front end: ``gpecontrol <command> --config FILE``.

Commands
--------
stationary      ground and/or first excited state of the configured trap
optimize        filter-aware optimal control run, writes a result bundle
compare-filter  optimize without the filter, then score that control with it
sweep           optimize over a list of horizons (``[sweep] horizons``)
evaluate        forward-only scoring of a given control CSV

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import control as ctl
from .config import ConfigError, RunConfig, load_config
from .control import FilterError
from .dynamics import EDGE_TOLERANCE, NumericalError, chemical_potential, energy, excited_state, ground_state
from .grid import save_wavefunction
from .optimizer import HISTORY_COLUMNS, OctProblem, evaluate_protocol, optimize, terminal_hold_drift

log = logging.getLogger("gpecontrol")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
SWEEP_COLUMNS = ("T", "J", "J_terminal", "fidelity")

_STATES = {}


def _fmt(v):
    return f"{v:.17g}"


# ---------------------------------------------------------------- readers/writers
def write_cost_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row["iter"]] + [_fmt(row[c]) for c in HISTORY_COLUMNS[1:]])


def read_cost_history(path):
    """Cost-history CSV as a dict of column arrays."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {name: data[:, i] for i, name in enumerate(HISTORY_COLUMNS)}


def write_density_map(path, record, units):
    """Rows ``t, |psi(x_1)|^2, ...``; the header carries the x values."""
    x = units.length_to_um(record.grid.x)
    scale = 1.0 / units.length_scale_um_per_unit
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t"] + [_fmt(v) for v in x])
        for t, snap in zip(record.snapshot_times, record.snapshots):
            writer.writerow([_fmt(units.time_to_ms(t))] + [_fmt(v) for v in np.abs(snap.values) ** 2 * scale])


def read_density_map(path):
    """Return ``(t, x, density)`` from a density-map CSV."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    x = np.array([float(v) for v in header[1:]])
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], x, data[:, 1:]


def write_sweep(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in SWEEP_COLUMNS])


def read_sweep(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {name: data[:, i] for i, name in enumerate(SWEEP_COLUMNS)}


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- problem setup
def stationary_states(cfg: RunConfig):
    """``(psi0, psi_d)``: ground state at ``lambda0``, excited state at ``lambdaT``."""
    t = cfg.values["trap"]
    s = cfg.values["stationary"]
    key = (repr(cfg.values["units"]), repr(cfg.values["grid"]), repr(t), repr(s), cfg.imaginary_dt())
    if key not in _STATES:
        units = cfg.units
        kw = dict(kappa=t["kappa"], grid=cfg.grid, tolerance=s["tolerance"], dt=cfg.imaginary_dt(),
                  mass=units.mass, max_steps=s["max_steps"])
        lam0 = units.length_to_units(t["lambda0"])
        lamT = units.length_to_units(t["lambdaT"])
        psi0 = ground_state(cfg.trap, lam0, **kw)
        ground_T = psi0 if lamT == lam0 else ground_state(cfg.trap, lamT, **kw)
        psi_d = excited_state(cfg.trap, lamT, ground=ground_T, **kw)
        _STATES[key] = (psi0, psi_d)
    return _STATES[key]


def build_problem(cfg: RunConfig, T_ms=None, filtered=True, seed=None) -> OctProblem:
    """Dimensionless :class:`OctProblem` for the configured scenario."""
    units = cfg.units
    try:
        kernel = cfg.kernel() if filtered else None
        T, T_star = cfg.horizons(T_ms)
        try:
            ctl.steps_for(T, cfg.dt)
        except ValueError as exc:
            raise ConfigError(str(exc), "propagation.T" if T_ms is None else "horizon") from None
        if kernel is None:
            T_star = T
        psi0, psi_d = stationary_states(cfg)
        return OctProblem.from_horizons(
            T, T_star, cfg.dt,
            grid=cfg.grid,
            trap=cfg.trap,
            kappa=cfg["trap.kappa"],
            psi0=psi0,
            psi_d=psi_d,
            gamma=cfg["optimizer.gamma"],
            lambda0=units.length_to_units(cfg["trap.lambda0"]),
            lambdaT=units.length_to_units(cfg["trap.lambdaT"]),
            kernel=kernel,
            mass=units.mass,
            settings=cfg.optimizer_settings(seed),
            store_every=cfg["propagation.store_every"],
        )
    except FilterError as exc:
        raise ConfigError(str(exc), "filter") from None
    except (ConfigError, NumericalError):
        raise
    except ValueError as exc:
        raise ConfigError(str(exc), "propagation") from None


def _edge_check(record, what):
    if record.edge_amplitude > EDGE_TOLERANCE:
        log.warning("%s: |psi| reaches %.2g at the box edge; widen the grid", what, record.edge_amplitude)


def _write_bundle(out, cfg, problem, lam, lam_star, record):
    """Control, density map and terminal state files; returns their names."""
    units = cfg.units
    out.mkdir(parents=True, exist_ok=True)
    ctl.save_control(out / "control.csv", lam, lam_star, t_scale=units.time_scale_ms_per_unit,
                     x_scale=units.length_scale_um_per_unit)
    write_density_map(out / "density_map.csv", record, units)
    save_wavefunction(out / "terminal_wavefunction.csv", record.final, x_scale=units.length_scale_um_per_unit)
    return {"control": "control.csv", "density_map": "density_map.csv",
            "terminal_wavefunction": "terminal_wavefunction.csv"}


# ---------------------------------------------------------------- commands
def run_optimize(cfg: RunConfig, out, T_ms=None, seed=None, filtered=True) -> dict:
    """Optimize one horizon and write its bundle to ``out``."""
    return _run_optimize(cfg, out, T_ms, seed, filtered)[0]


def _run_optimize(cfg, out, T_ms, seed, filtered):
    out = Path(out)
    problem = build_problem(cfg, T_ms, filtered, seed)
    start = time.perf_counter()
    result = optimize(problem)
    wall = time.perf_counter() - start
    # the optimizer keeps only full histories; recompute snapshots at the output stride
    _, _, record = evaluate_protocol(result.lam, problem, filtered=problem.filtered)
    _edge_check(record, "optimized trajectory")
    files = _write_bundle(out, cfg, problem, result.lam, result.lam_star, record)
    write_cost_history(out / "cost_history.csv", result.history)
    files["cost_history"] = "cost_history.csv"
    units = cfg.units
    last = result.history[-1]
    summary = {
        "T_ms": units.time_to_ms(problem.T),
        "T_star_ms": units.time_to_ms(problem.T_star),
        "filtered": problem.filtered,
        "fidelity": result.fidelity,
        "J": last["J"],
        "J_terminal": last["J_terminal"],
        "J_penalty": last["J_penalty"],
        "iterations": result.iterations,
        "reason": result.reason,
        "wall_time_s": wall,
        "edge_amplitude": record.edge_amplitude,
        "terminal_hold_drift": terminal_hold_drift(problem, record.final),
        "files": files,
    }
    _write_json(out / "summary.json", summary)
    log.info("T=%g ms: fidelity %.6f, J %.3e after %d iterations (%s, %.1f s)", summary["T_ms"],
             result.fidelity, last["J"], result.iterations, result.reason, wall)
    return summary, result


def cmd_stationary(cfg: RunConfig, out, which=("ground", "excited")) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    units = cfg.units
    t = cfg.values["trap"]
    psi0, psi_d = stationary_states(cfg)
    rows = []
    files = {}
    for name in which:
        psi, lam_um = (psi0, t["lambda0"]) if name == "ground" else (psi_d, t["lambdaT"])
        lam = units.length_to_units(lam_um)
        fname = f"{name}_state.csv"
        save_wavefunction(out / fname, psi, x_scale=units.length_scale_um_per_unit)
        files[name] = fname
        rows.append([name, energy(psi, cfg.trap, lam, t["kappa"], units.mass),
                     chemical_potential(psi, cfg.trap, lam, t["kappa"], units.mass),
                     abs(psi.values[len(psi.values) // 2]), psi.edge_amplitude()])
        if psi.edge_amplitude() > EDGE_TOLERANCE:
            log.warning("%s state reaches the box edge (|psi| = %.2g)", name, psi.edge_amplitude())
    with open(out / "stationary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["state", "energy", "chemical_potential", "center_amplitude", "edge_amplitude"])
        for row in rows:
            writer.writerow([row[0]] + [_fmt(v) for v in row[1:]])
    files["table"] = "stationary.csv"
    summary = {"states": {r[0]: {"energy": r[1], "chemical_potential": r[2]} for r in rows}, "files": files}
    _write_json(out / "summary.json", summary)
    return summary


def _extend(values, n):
    values = np.asarray(values, dtype=float)
    if len(values) > n:
        raise ConfigError(f"control has {len(values)} samples, scenario needs at most {n}", "control")
    return np.concatenate([values, np.full(n - len(values), values[-1])])


def cmd_evaluate_control(cfg: RunConfig, lam_values, out, label="evaluation") -> dict:
    """Score a dimensionless control with and without the configured filter."""
    out = Path(out)
    problem = build_problem(cfg)
    lam = ctl.clamp_tail(problem.control(_extend(lam_values, problem.n_steps + 1)))
    f_raw, J_raw, _ = evaluate_protocol(lam, problem, filtered=False)
    f_filt, J_filt, record = evaluate_protocol(lam, problem, filtered=True)
    _edge_check(record, label)
    files = _write_bundle(out, cfg, problem, lam, problem.apply(lam), record)
    summary = {
        "T_ms": cfg.units.time_to_ms(problem.T),
        "T_star_ms": cfg.units.time_to_ms(problem.T_star),
        "fidelity_unfiltered": f_raw,
        "fidelity_filtered": f_filt,
        "J_unfiltered": J_raw,
        "J_filtered": J_filt,
        "edge_amplitude": record.edge_amplitude,
        "files": files,
    }
    _write_json(out / "summary.json", summary)
    return summary


def cmd_compare_filter(cfg: RunConfig, out, seed=None) -> dict:
    out = Path(out)
    if cfg.kernel() is None:
        raise ConfigError("compare-filter needs a filter", "filter.kind")
    raw, result = _run_optimize(cfg, out / "unfiltered", None, seed, False)
    ev = cmd_evaluate_control(cfg, result.lam.values, out / "filtered_evaluation", "filtered evaluation")
    comparison = {
        "fidelity_optimized": raw["fidelity"],
        "fidelity_unfiltered": ev["fidelity_unfiltered"],
        "fidelity_filtered": ev["fidelity_filtered"],
        "fidelity_drop": ev["fidelity_unfiltered"] - ev["fidelity_filtered"],
        "T_ms": raw["T_ms"],
        "bundles": {"unfiltered": "unfiltered", "filtered_evaluation": "filtered_evaluation"},
    }
    _write_json(out / "comparison.json", comparison)
    log.info("unfiltered control: fidelity %.6f raw, %.6f through the filter",
             comparison["fidelity_unfiltered"], comparison["fidelity_filtered"])
    return comparison


def _sweep_entry(args):
    cfg, T_ms, out, seed = args
    summary = run_optimize(cfg, out, T_ms=T_ms, seed=seed)
    return {"T": T_ms, "J": summary["J"], "J_terminal": summary["J_terminal"], "fidelity": summary["fidelity"]}


def sweep_dirname(T_ms):
    return f"T_{T_ms:g}ms"


def cmd_sweep(cfg: RunConfig, out, horizons=None, workers=None, seed=None):
    out = Path(out)
    horizons = list(cfg.sweep_horizons() if horizons is None else horizons)
    workers = cfg["sweep.workers"] if workers is None else workers
    jobs = [(cfg, T, out / sweep_dirname(T), seed) for T in horizons]
    # validate every horizon before spending time on any of them
    for T in horizons:
        try:
            ctl.steps_for(cfg.units.time_to_units(T), cfg.dt)
        except ValueError as exc:
            raise ConfigError(str(exc), "sweep.horizons") from None
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_entry, jobs))
    else:
        rows = [_sweep_entry(job) for job in jobs]
    out.mkdir(parents=True, exist_ok=True)
    write_sweep(out / "sweep.csv", rows)
    return rows


# ---------------------------------------------------------------- entry point
def build_parser():
    parser = argparse.ArgumentParser(prog="gpecontrol", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="INI file or name of a shipped scenario")
        p.add_argument("--out", help="output directory (default: [output] directory)")
        p.add_argument("--seed", type=int, help="seed for the initial-guess jitter")
        p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
        return p

    p = common(sub.add_parser("stationary", help="compute stationary states"))
    p.add_argument("--which", choices=("ground", "excited", "both"), default="both")
    common(sub.add_parser("optimize", help="optimize the configured scenario"))
    common(sub.add_parser("compare-filter", help="optimize without the filter and score through it"))
    p = common(sub.add_parser("sweep", help="optimize over several horizons"))
    p.add_argument("--workers", type=int, help="concurrent sweep entries")
    p.add_argument("--horizons", help="comma-separated horizons in ms (default: [sweep] horizons)")
    p = common(sub.add_parser("evaluate", help="score a control CSV"))
    p.add_argument("--control", required=True, help="CSV with columns t,lambda,lambda_star (ms, um)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.override)
        out = Path(args.out if args.out else cfg["output.directory"])
        if args.command == "stationary":
            which = ("ground", "excited") if args.which == "both" else (args.which,)
            result = cmd_stationary(cfg, out, which)
        elif args.command == "optimize":
            result = run_optimize(cfg, out, seed=args.seed)
        elif args.command == "compare-filter":
            result = cmd_compare_filter(cfg, out, seed=args.seed)
        elif args.command == "sweep":
            horizons = None
            if args.horizons:
                try:
                    horizons = [float(v) for v in args.horizons.split(",")]
                except ValueError:
                    raise ConfigError(f"cannot parse {args.horizons!r}", "--horizons") from None
            if args.workers is not None and args.workers < 1:
                raise ConfigError("must be at least 1", "--workers")
            result = cmd_sweep(cfg, out, horizons, args.workers, args.seed)
        else:
            path = Path(args.control)
            if not path.is_file():
                raise ConfigError(f"control file {path} does not exist", "--control")
            try:
                lam, _ = ctl.load_control(path, t_scale=cfg.units.time_scale_ms_per_unit,
                                          x_scale=cfg.units.length_scale_um_per_unit)
            except ValueError as exc:
                raise ConfigError(str(exc), "--control") from None
            if abs(lam.dt - cfg.dt) > 1e-9 * cfg.dt:
                raise ConfigError(f"control time step {lam.dt} differs from the configured dt", "--control")
            result = cmd_evaluate_control(cfg, lam.values, out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
