"""
Coupling scans and finite-size scaling.

A scan evaluates the full observable record on a grid of ``Jy`` values for
one lattice; peaks are refined by a local parabola, and peak heights or
locations across lattice sizes are fitted by power laws or a ``1/L`` shift.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np
from scipy.stats import linregress

from .lattice import LatticeSpec
from .master import spectral_decomposition
from .observables import (
    NonlinearResponseWarning, UnsupportedSpaceError, angular_average, magnetization,
    negativity, quantum_fisher_information, susceptibility_tensor, von_neumann_entropy,
)
from .solvers import SolverConfig, is_stochastic, make_solver

__all__ = [
    "ScanResult", "PeakEstimate", "PowerLawFit", "CriticalCoupling", "DerivativeSeries",
    "ScanRangeError", "COLUMNS", "observable_record", "run_scan", "jy_grid",
    "refine_grid", "find_peak", "entropy_derivative", "power_law_fit",
    "critical_coupling", "read_scan_csv", "write_scan_csv",
]

logger = logging.getLogger(__name__)

VALUE_COLUMNS = ["chi_av", "chi_xx", "chi_xy", "chi_yx", "chi_yy", "S",
                 "FQ_per_site", "tau_star", "negativity"]
ERROR_COLUMNS = [c + "_err" for c in VALUE_COLUMNS if c != "tau_star"]
EXTRA_COLUMNS = ["Mz", "Mz_err", "nonlinearity", "status"]
COLUMNS = ["Jy"] + VALUE_COLUMNS + ERROR_COLUMNS + EXTRA_COLUMNS

# negativity needs a dense partial transpose; skip it above this many sites
NEGATIVITY_MAX_SITES = 10


class ScanRangeError(ValueError):
    """The discrete maximum sits on the edge of the scanned interval."""


def _jy_key(jy) -> float:
    return round(float(jy), 10)


# ---------------------------------------------------------------------------
# single point

def _chi_av_error(chi, err):
    # linear propagation through the angular average, entries independent
    base = angular_average(chi)
    grad = np.zeros((2, 2))
    for idx in np.ndindex(2, 2):
        step = 1e-6 * max(1.0, abs(chi[idx]))
        bumped = chi.copy()
        bumped[idx] += step
        grad[idx] = (angular_average(bumped) - base) / step
    return float(np.sqrt(((grad * err) ** 2).sum()))


def observable_record(spec: LatticeSpec, solver=None, *, h0: float = 0.01,
                      n_fields: int = 4) -> dict:
    """Every scan column at one coupling.

    The susceptibility uses ``n_fields`` finite fields per in-plane axis;
    entropy, QFI, negativity and ``M_z`` are evaluated on the zero-field
    steady state. Errors are zero for deterministic solvers; for
    trajectory-based states only the fit and magnetization errors are
    available and the density-matrix derived errors are NaN.
    """
    solve = make_solver(solver or "master") if solver is None or isinstance(solver, str) \
        else solver
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NonlinearResponseWarning)
        chi = susceptibility_tensor(solve, spec, h0=h0, n_fields=n_fields)
    for w in caught:
        logger.warning("Jy=%g: %s", spec.jy, w.message)
    rho = solve(spec.with_(h=0.0))
    rho.check()
    decomp = spectral_decomposition(rho)
    entropy = von_neumann_entropy(decomp)
    space = rho.space
    fq, tau = quantum_fisher_information(decomp, space)
    neg = math.nan
    if spec.n_sites <= NEGATIVITY_MAX_SITES:
        try:
            neg = negativity(rho, spec=spec)
        except UnsupportedSpaceError:
            pass
    mag = magnetization(rho, spec)
    noisy = is_stochastic(rho)
    dm_err = math.nan if noisy else 0.0
    row = {
        "Jy": float(spec.jy),
        "chi_av": angular_average(chi),
        "chi_xx": chi.xx, "chi_xy": chi.xy, "chi_yx": chi.yx, "chi_yy": chi.yy,
        "S": entropy,
        "FQ_per_site": fq / spec.n_sites,
        "tau_star": tau,
        "negativity": neg,
        "chi_av_err": _chi_av_error(chi.chi, chi.stderr),
        "chi_xx_err": chi.stderr[0, 0], "chi_xy_err": chi.stderr[0, 1],
        "chi_yx_err": chi.stderr[1, 0], "chi_yy_err": chi.stderr[1, 1],
        "S_err": dm_err, "FQ_per_site_err": dm_err,
        "negativity_err": dm_err if not math.isnan(neg) else math.nan,
        "Mz": mag.mz,
        "Mz_err": mag.stderr[2] if mag.stderr is not None else 0.0,
        "nonlinearity": float(np.max(chi.nonlinearity)),
        "status": "ok",
    }
    return {k: (float(v) if k != "status" else v) for k, v in row.items()}


def _failed_row(jy, exc) -> dict:
    row = {c: math.nan for c in COLUMNS}
    row["Jy"] = float(jy)
    row["status"] = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
    return row


def _scan_point(jy, template, solver, h0, n_fields):
    spec = template.with_(jy=float(jy))
    try:
        return observable_record(spec, solver, h0=h0, n_fields=n_fields)
    except (ArithmeticError, RuntimeError, ValueError, MemoryError,
            np.linalg.LinAlgError) as exc:
        logger.error("Jy=%g failed: %s", jy, exc)
        return _failed_row(jy, exc)


# ---------------------------------------------------------------------------
# scans

@dataclass
class ScanResult:
    """Rows of the observable record ordered by strictly increasing ``Jy``."""

    rows: list
    spec: dict
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        jy = [r["Jy"] for r in self.rows]
        if any(b <= a for a, b in zip(jy, jy[1:])):
            raise ValueError("scan rows must have strictly increasing Jy")

    @property
    def L(self) -> int | None:
        return int(self.spec["lx"]) if "lx" in self.spec else None

    @property
    def jy(self) -> np.ndarray:
        return np.array([r["Jy"] for r in self.rows], dtype=float)

    def column(self, name) -> np.ndarray:
        return np.array([float(r[name]) for r in self.rows])

    def error(self, name) -> np.ndarray:
        key = name + "_err"
        if self.rows and key in self.rows[0]:
            return self.column(key)
        return np.zeros(len(self.rows))

    def ok(self) -> "ScanResult":
        """Only rows whose solve succeeded."""
        return ScanResult([r for r in self.rows if r.get("status", "ok") == "ok"],
                          self.spec, self.provenance)

    def __len__(self):
        return len(self.rows)


def jy_grid(start: float, stop: float, step: float) -> np.ndarray:
    """Inclusive grid ``start, start + step, ..., stop``."""
    if step <= 0 or stop < start:
        raise ValueError(f"bad grid {start}:{stop}:{step}")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return np.round(start + step * np.arange(n), 10)


def refine_grid(scan: ScanResult, column: str = "chi_av", step: float = 0.01,
                half_width: float = 0.05) -> np.ndarray:
    """Extra ``Jy`` points at ``step`` within ``half_width`` of the discrete peak."""
    ok = scan.ok()
    k = int(np.nanargmax(ok.column(column)))
    centre = ok.jy[k]
    fine = jy_grid(centre - half_width, centre + half_width, step)
    fine = fine[(fine >= ok.jy[0]) & (fine <= ok.jy[-1])]
    have = {_jy_key(j) for j in scan.jy}
    return np.array([j for j in fine if _jy_key(j) not in have])


def _format(value) -> str:
    if isinstance(value, str):
        return value
    return repr(float(value))


def write_scan_csv(rows, path):
    """Write rows atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COLUMNS)
        for row in rows:
            writer.writerow([_format(row.get(c, math.nan)) for c in COLUMNS])
    os.replace(tmp, path)


def read_scan_csv(path, spec: dict | None = None) -> ScanResult:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "Jy" not in reader.fieldnames:
            raise ValueError(f"{path}: not a scan CSV (no Jy column)")
        rows = []
        for raw in reader:
            rows.append({k: (v if k == "status" else float(v)) for k, v in raw.items()})
    meta = _read_meta(path)
    return ScanResult(rows, spec or meta.get("spec", {}), meta.get("provenance", {}))


def _meta_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def _write_meta(path, spec, provenance):
    import json
    _meta_path(path).write_text(json.dumps({"spec": spec, "provenance": provenance},
                                           indent=2, sort_keys=True))


def _read_meta(path) -> dict:
    import json
    meta = _meta_path(path)
    return json.loads(meta.read_text()) if meta.exists() else {}


def run_scan(template: LatticeSpec, jy_values, solver=None, *, out=None,
             resume: bool = False, n_jobs: int = 1, h0: float = 0.01,
             n_fields: int = 4) -> ScanResult:
    """Evaluate :func:`observable_record` for every coupling in ``jy_values``.

    Rows are persisted to ``out`` (CSV, rewritten in ``Jy`` order after
    every completed point, plus a ``.json`` sidecar with spec and solver
    provenance). With ``resume`` the couplings already present in ``out``
    are not recomputed; the final file is identical to a single-shot run.
    A failing point is kept as a row with NaNs and an error status.

    ``solver`` is a :class:`SolverConfig` (required for ``n_jobs > 1``) or a
    plain callable ``spec -> DensityMatrix``.
    """
    solver = solver if solver is not None else SolverConfig()
    jy_values = sorted({_jy_key(j) for j in jy_values})
    spec_dict = template.as_dict()
    spec_dict.pop("jy")
    provenance = solver.provenance() if isinstance(solver, SolverConfig) else \
        {"kind": getattr(solver, "__name__", type(solver).__name__)}
    provenance.update({"h0": h0, "n_fields": n_fields})

    done = {}
    if out is not None and resume and Path(out).exists():
        previous = read_scan_csv(out)
        meta = _read_meta(out)
        if meta and meta.get("spec") != spec_dict:
            raise ValueError(f"{out} was produced with a different lattice spec")
        done = {_jy_key(r["Jy"]): r for r in previous.rows}
        logger.info("resuming %s: %d of %d points done", out, len(done), len(jy_values))
    if out is not None:
        _write_meta(out, spec_dict, provenance)

    todo = [j for j in jy_values if j not in done]
    work = partial(_scan_point, template=template, solver=solver, h0=h0, n_fields=n_fields)

    def finished(row):
        done[_jy_key(row["Jy"])] = row
        if out is not None:
            write_scan_csv([done[k] for k in sorted(done)], out)

    if n_jobs > 1 and len(todo) > 1:
        if not isinstance(solver, SolverConfig):
            raise TypeError("parallel scans need a SolverConfig solver")
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            for row in pool.map(work, todo):
                finished(row)
    else:
        for jy in todo:
            finished(work(jy))
    return ScanResult([done[k] for k in sorted(done)], spec_dict, provenance)


# ---------------------------------------------------------------------------
# peaks and derivatives

@dataclass
class PeakEstimate:
    location: float
    height: float
    location_err: float
    height_err: float
    column: str = ""
    L: int | None = None

    def as_dict(self):
        return {"L": self.L, "column": self.column, "location": self.location,
                "height": self.height, "location_err": self.location_err,
                "height_err": self.height_err}


def _series(scan_or_xy, column):
    if isinstance(scan_or_xy, ScanResult):
        ok = scan_or_xy.ok()
        return ok.jy, ok.column(column), ok.error(column), scan_or_xy.L
    x, y, *rest = scan_or_xy
    err = rest[0] if rest else np.zeros(len(x))
    return np.asarray(x, float), np.asarray(y, float), np.asarray(err, float), None


def _vertex(x, y):
    # parabola through three points in coordinates centred on the middle one
    t = x - x[1]
    scale = max(abs(t[0]), abs(t[2]))
    u = t / scale
    a, b, c = np.linalg.solve(np.vander(u, 3), y)
    if not a < 0:
        raise ScanRangeError("no concave maximum at the discrete peak")
    uv = -b / (2 * a)
    return x[1] + scale * uv, c - b * b / (4 * a)


def find_peak(scan, column: str = "chi_av") -> PeakEstimate:
    """Vertex of the parabola through the discrete maximum and its neighbours.

    ``scan`` is a :class:`ScanResult` or an ``(x, y[, yerr])`` tuple. Errors
    are propagated linearly from the ordinate errors.
    """
    x, y, err, L = _series(scan, column)
    if len(x) < 3:
        raise ValueError("need at least 3 points to locate a peak")
    k = int(np.nanargmax(y))
    if k == 0 or k == len(x) - 1:
        raise ScanRangeError(
            f"maximum of {column} at the scan edge (Jy={x[k]:g}); widen the range")
    xs, ys, es = x[k - 1:k + 2], y[k - 1:k + 2], np.nan_to_num(err[k - 1:k + 2])
    loc, height = _vertex(xs, ys)
    jac = np.zeros((2, 3))
    for i in range(3):
        step = 1e-7 * max(1.0, abs(ys[i]))
        bumped = ys.copy()
        bumped[i] += step
        try:
            jac[:, i] = (np.array(_vertex(xs, bumped)) - (loc, height)) / step
        except ScanRangeError:
            jac[:, i] = np.nan
    var = (jac ** 2) @ (es ** 2)
    return PeakEstimate(float(loc), float(height), float(np.sqrt(var[0])),
                        float(np.sqrt(var[1])), column, L)


@dataclass
class DerivativeSeries:
    jy: np.ndarray
    value: np.ndarray
    stderr: np.ndarray

    def as_xy(self):
        return self.jy, self.value, self.stderr


def entropy_derivative(scan, column: str = "S") -> DerivativeSeries:
    """``dS/dJy`` by central differences, one-sided at the ends."""
    x, s, err, _ = _series(scan, column)
    if len(x) < 3:
        raise ValueError("need at least 3 points for a derivative")
    err = np.nan_to_num(err)
    d = np.empty_like(s)
    e = np.empty_like(s)
    d[1:-1] = (s[2:] - s[:-2]) / (x[2:] - x[:-2])
    e[1:-1] = np.hypot(err[2:], err[:-2]) / (x[2:] - x[:-2])
    for i, j in ((0, 1), (-1, -2)):
        d[i] = (s[j] - s[i]) / (x[j] - x[i])
        e[i] = np.hypot(err[j], err[i]) / abs(x[j] - x[i])
    return DerivativeSeries(x, d, e)


# ---------------------------------------------------------------------------
# size scaling

@dataclass
class PowerLawFit:
    """``value = prefactor * L ** exponent``; errors are one standard deviation."""

    exponent: float
    prefactor: float
    stderr: float
    lmin: float
    residuals: np.ndarray
    prefactor_stderr: float = 0.0

    def as_dict(self):
        return {"exponent": self.exponent, "prefactor": self.prefactor,
                "stderr": self.stderr, "lmin": self.lmin,
                "prefactor_stderr": self.prefactor_stderr,
                "residuals": [float(r) for r in self.residuals]}


def _line_fit(x, y):
    """Least-squares line with one-sigma errors from the residual variance.

    The errors are formed from the residuals directly rather than from the
    correlation coefficient, so exact data give exactly zero error.
    """
    res = linregress(x, y)
    resid = y - (res.intercept + res.slope * x)
    n = len(x)
    if n <= 2:
        return res.slope, res.intercept, 0.0, 0.0, resid
    sxx = ((x - x.mean()) ** 2).sum()
    s2 = (resid @ resid) / (n - 2)
    slope_err = np.sqrt(s2 / sxx)
    inter_err = np.sqrt(s2 * (1.0 / n + x.mean() ** 2 / sxx))
    return res.slope, res.intercept, slope_err, inter_err, resid


def _filter_points(points, lmin):
    pts = sorted((float(L), float(v)) for L, v in points)
    if lmin is not None:
        pts = [p for p in pts if p[0] >= lmin]
    return np.array([p[0] for p in pts]), np.array([p[1] for p in pts])


def power_law_fit(points, lmin: float | None = None) -> PowerLawFit:
    """Least squares on ``(ln L, ln value)`` over points with ``L >= lmin``."""
    L, v = _filter_points(points, lmin)
    if len(L) < 2:
        raise ValueError(f"need at least 2 points with L >= {lmin}, got {len(L)}")
    if len(np.unique(L)) < 2:
        raise ValueError("need at least 2 distinct lattice sizes")
    if np.any(v <= 0) or np.any(L <= 0):
        raise ValueError("power-law fit needs positive sizes and values")
    slope, inter, slope_err, inter_err, resid = _line_fit(np.log(L), np.log(v))
    pref = float(np.exp(inter))
    return PowerLawFit(float(slope), pref, float(slope_err),
                       float(L.min()) if lmin is None else float(lmin), resid,
                       pref * float(inter_err))


@dataclass
class CriticalCoupling:
    """Intercept of ``J_max(L) = J_c + a / L``."""

    jc: float
    stderr: float
    slope: float
    residuals: np.ndarray
    form: str = "J_c + a/L"

    def as_dict(self):
        return {"jc": self.jc, "stderr": self.stderr, "slope": self.slope,
                "form": self.form, "residuals": [float(r) for r in self.residuals]}


def critical_coupling(points) -> CriticalCoupling:
    """Extrapolate peak locations ``(L, Jy_max)`` to infinite size."""
    L, j = _filter_points(points, None)
    if len(L) < 3:
        raise ValueError(f"need at least 3 lattice sizes, got {len(L)}")
    slope, inter, _, inter_err, resid = _line_fit(1.0 / L, j)
    return CriticalCoupling(float(inter), float(inter_err), float(slope), resid)
