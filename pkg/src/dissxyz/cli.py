"""
Command line front end: ``dissxyz <subcommand> ...``.

Exit status 0 on success, 2 on usage errors (bad arguments, unreadable
config or input files), 1 when a solver or fit fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .corner import CornerConvergenceError, CornerSettings, MergePlan, converge_in_corner_dim
from .lattice import LatticeSpec, read_config
from .master import ConvergenceError, DegenerateSteadyStateError, PositivityError, _jsonable
from .scaling import (
    ScanRangeError, critical_coupling, entropy_derivative, find_peak, jy_grid,
    observable_record, power_law_fit, read_scan_csv, refine_grid, run_scan,
)
from .solvers import SOLVER_KINDS, SolverConfig
from .trajectories import EnsembleSettings, StepSizeError

logger = logging.getLogger("dissxyz")


class UsageError(Exception):
    pass


SOLVER_ERRORS = (ConvergenceError, DegenerateSteadyStateError, PositivityError,
                 CornerConvergenceError, StepSizeError, ScanRangeError, MemoryError,
                 np.linalg.LinAlgError, ArithmeticError, RuntimeError, ValueError)


def _range(text):
    parts = text.split(":")
    try:
        if len(parts) == 1:
            return np.array([float(parts[0])])
        if len(parts) == 3:
            return jy_grid(*(float(p) for p in parts))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    raise argparse.ArgumentTypeError(f"expected a value or start:stop:step, got {text!r}")


def _int_list(text):
    try:
        return [int(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")


def _add_spec_args(p):
    p.add_argument("--config", help="lattice config file (key = value lines)")
    p.add_argument("--L", type=int, help="override both lattice sides")
    p.add_argument("--lx", type=int)
    p.add_argument("--ly", type=int)


def _add_solver_args(p):
    p.add_argument("--solver", choices=SOLVER_KINDS, default="master")
    p.add_argument("--method", default="auto",
                   help="master-equation method: auto, nullspace-plain, krylov, evolve")
    p.add_argument("--seed", type=int, default=0, help="trajectory RNG seed")
    p.add_argument("--trajectories", type=int, default=500)
    p.add_argument("--t-avg", type=float, default=200.0)
    p.add_argument("--t-burn", type=float, default=20.0)
    p.add_argument("--dt", type=float, default=0.01, help="trajectory time step")
    p.add_argument("--corner-dim", type=int, help="corner dimension M_C for --solver corner")
    p.add_argument("--checkpoint-dir", help="directory for corner merge checkpoints")
    p.add_argument("--threads", type=int, default=1, help="worker processes")
    p.add_argument("--h0", type=float, default=0.01, help="smallest susceptibility field")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dissxyz", description="Steady states of the dissipative XYZ lattice.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="observable record on a grid of Jy values")
    _add_spec_args(p)
    _add_solver_args(p)
    p.add_argument("--jy", type=_range, default=jy_grid(0.9, 1.3, 0.025),
                   help="start:stop:step (inclusive), default 0.9:1.3:0.025")
    p.add_argument("--refine", action="store_true",
                   help="add 0.01 steps within 0.05 of the discrete chi_av peak")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--resume", action="store_true", help="skip points already in --out")

    p = sub.add_parser("observables", help="full observable record at one coupling")
    _add_spec_args(p)
    _add_solver_args(p)
    p.add_argument("--jy", type=float, help="override Jy of the config")
    p.add_argument("--out", help="output JSON (default stdout)")

    p = sub.add_parser("peaks", help="refined peaks of one column for several scans")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="scan CSV files")
    p.add_argument("--column", default="chi_av",
                   help="scan column, or dS_dJy for the entropy derivative")
    p.add_argument("--out", help="peaks CSV (default: JSON on stdout only)")

    p = sub.add_parser("exponents", help="power-law fit of peak heights against L")
    p.add_argument("--in", dest="input", required=True, help="peaks CSV")
    p.add_argument("--column", default="chi_av")
    p.add_argument("--lmin", type=float, default=None)
    p.add_argument("--out", help="output JSON (default stdout)")

    p = sub.add_parser("corner-converge", help="increase M_C until M_z converges")
    _add_spec_args(p)
    p.add_argument("--jy", type=float)
    p.add_argument("--corner-schedule", type=_int_list, default=[64, 128, 256, 512])
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trajectories", type=int, default=500)
    p.add_argument("--t-avg", type=float, default=200.0)
    p.add_argument("--master-limit", type=int, default=4096,
                   help="largest corner dimension solved without trajectories")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="output JSON (default stdout)")
    return parser


def _spec_from(args) -> LatticeSpec:
    spec = LatticeSpec()
    if args.config:
        try:
            spec = read_config(args.config)
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    changes = {}
    if args.L is not None:
        changes.update(lx=args.L, ly=args.L)
    if args.lx is not None:
        changes["lx"] = args.lx
    if args.ly is not None:
        changes["ly"] = args.ly
    if getattr(args, "jy", None) is not None and not isinstance(args.jy, np.ndarray):
        changes["jy"] = args.jy
    try:
        return spec.with_(**changes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _solver_from(args) -> SolverConfig:
    ensemble = EnsembleSettings(n_traj=args.trajectories, t_avg=args.t_avg,
                                t_burn=args.t_burn, dt=args.dt, seed=args.seed)
    if args.solver == "corner" and args.corner_dim is None:
        raise UsageError("--solver corner needs --corner-dim")
    corner = CornerSettings(ensemble=ensemble, checkpoint_dir=args.checkpoint_dir)
    return SolverConfig(kind=args.solver, method=args.method, ensemble=ensemble,
                        corner_dim=args.corner_dim, corner=corner)


def _emit(payload, out):
    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _cmd_scan(args):
    spec = _spec_from(args)
    solver = _solver_from(args)
    scan = run_scan(spec, args.jy, solver, out=args.out, resume=args.resume,
                    n_jobs=args.threads, h0=args.h0)
    if args.refine:
        extra = refine_grid(scan)
        if len(extra):
            scan = run_scan(spec, extra, solver, out=args.out, resume=True,
                            n_jobs=args.threads, h0=args.h0)
    failed = [r["Jy"] for r in scan.rows if r["status"] != "ok"]
    if failed:
        logger.error("%d scan points failed: %s", len(failed), failed)
    print(f"wrote {len(scan)} rows to {args.out}")
    return 0


def _cmd_observables(args):
    spec = _spec_from(args)
    solver = _solver_from(args)
    record = observable_record(spec, solver, h0=args.h0)
    _emit({"spec": spec.as_dict(), "solver": solver.provenance(), "h0": args.h0,
           "record": record}, args.out)
    return 0


def _cmd_peaks(args):
    peaks = []
    for path in args.inputs:
        try:
            scan = read_scan_csv(path)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read {path}: {exc}") from None
        if args.column == "dS_dJy":
            series = entropy_derivative(scan)
            peak = find_peak(series.as_xy(), args.column)
            peak.L = scan.L
        else:
            if scan.rows and args.column not in scan.rows[0]:
                raise UsageError(f"{path} has no column {args.column!r}")
            peak = find_peak(scan, args.column)
        peaks.append(peak.as_dict())
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(peaks[0]))
            writer.writeheader()
            for row in peaks:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                                 for k, v in row.items()})
    _emit(peaks, None)
    return 0


def _cmd_exponents(args):
    try:
        with open(args.input, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise UsageError(f"cannot read {args.input}: {exc}") from None
    rows = [r for r in rows if r.get("column", args.column) == args.column]
    if not rows or "L" not in rows[0] or "height" not in rows[0]:
        raise UsageError(f"{args.input} has no peaks for column {args.column!r}")
    try:
        heights = [(float(r["L"]), float(r["height"])) for r in rows]
        locations = [(float(r["L"]), float(r["location"])) for r in rows]
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad peaks file: {exc}") from None
    fit = power_law_fit(heights, args.lmin)
    payload = {"column": args.column, "exponent": fit.exponent, "prefactor": fit.prefactor,
               "stderr": fit.stderr, "lmin": fit.lmin}
    distinct = {L for L, _ in locations if args.lmin is None or L >= args.lmin}
    if len(distinct) >= 3:
        keep = [p for p in locations if args.lmin is None or p[0] >= args.lmin]
        payload["critical_coupling"] = critical_coupling(keep).as_dict()
    _emit(payload, args.out)
    return 0


def _cmd_corner_converge(args):
    spec = _spec_from(args)
    ensemble = EnsembleSettings(n_traj=args.trajectories, t_avg=args.t_avg, seed=args.seed,
                                n_jobs=args.threads)
    settings = CornerSettings(master_limit=args.master_limit, ensemble=ensemble,
                              checkpoint_dir=args.checkpoint_dir)

    def mz(rho):
        from .observables import magnetization
        m = magnetization(rho)
        return m.mz, (m.stderr[2] if m.stderr is not None else 0.0)

    payload = {"spec": spec.as_dict(), "schedule": args.corner_schedule, "tol": args.tol}
    try:
        _, trace = converge_in_corner_dim(spec, args.corner_schedule, mz, args.tol, settings,
                                          lambda m: MergePlan.columns(spec, m))
    except CornerConvergenceError as exc:
        payload.update(converged=False, m_c=exc.trace.m_c, mz=exc.trace.values,
                       stderr=exc.trace.stderr)
        _emit(payload, args.out)
        raise
    payload.update(converged=True, m_c=trace.m_c, mz=trace.values, stderr=trace.stderr)
    _emit(payload, args.out)
    return 0


COMMANDS = {
    "scan": _cmd_scan,
    "observables": _cmd_observables,
    "peaks": _cmd_peaks,
    "exponents": _cmd_exponents,
    "corner-converge": _cmd_corner_converge,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dissxyz {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except SOLVER_ERRORS as exc:
        print(f"dissxyz {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
