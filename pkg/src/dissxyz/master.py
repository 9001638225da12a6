"""
Exact steady states of the Lindblad master equation.

Three routes are provided and cross-checked in the tests:

* :func:`evolve_to_steady` integrates the master equation with fixed-step
  RK4 until the state stops moving.
* :func:`steady_state_nullspace` solves for the kernel of the vectorized
  generator, optionally restricted to operators that are invariant under a
  group of basis permutations (lattice symmetries of a unique steady state).
* :func:`steady_state_krylov` runs GMRES on the generator preconditioned by
  its no-jump (Lyapunov) part; it works on dense corner-space operators
  where the other two are too slow.
"""

from __future__ import annotations

import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import lapack

from .lattice import (LatticeSpec, basis_permutation, build_hamiltonian,
                      build_jump_operators, lattice_permutations, site_operator)

__all__ = [
    "DensityMatrix", "SpectralDecomposition", "SolverSettings", "FullSpace",
    "Liouvillian", "apply_liouvillian", "evolve_to_steady",
    "steady_state_nullspace", "steady_state_krylov", "spectral_decomposition",
    "solve_steady_state", "trace_distance", "ConvergenceError",
    "DegenerateSteadyStateError", "PositivityError", "save_density_matrix",
    "load_density_matrix", "pure_state",
]

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """Time integration did not become stationary before ``t_max``."""

    def __init__(self, message, residual=None, time=None):
        super().__init__(message)
        self.residual = residual
        self.time = time


class DegenerateSteadyStateError(RuntimeError):
    pass


class PositivityError(ValueError):
    pass


class FullSpace:
    """Site operators of the full ``2**N`` dimensional Hilbert space."""

    is_full = True

    def __init__(self, n_sites: int):
        self.n_sites = n_sites
        self.dim = 2 ** n_sites
        self._cache = {}

    def site_operator(self, site, which):
        key = (site, which)
        if key not in self._cache:
            self._cache[key] = site_operator(self.n_sites, site, which)
        return self._cache[key]


@dataclass
class DensityMatrix:
    """Dense density matrix together with the space its basis refers to."""

    data: np.ndarray
    space: object = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=complex)
        if self.data.ndim != 2 or self.data.shape[0] != self.data.shape[1]:
            raise ValueError("density matrix must be square")
        if self.space is None:
            n = int(round(np.log2(self.dim)))
            if 2 ** n == self.dim:
                self.space = FullSpace(n)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    def expect(self, op) -> complex:
        return complex(np.sum(op.T.multiply(self.data)) if sp.issparse(op)
                       else np.einsum("ij,ji->", op, self.data))

    def check(self, herm_tol=1e-10, trace_tol=1e-10, eig_tol=1e-8):
        """Raise if the Hermiticity, trace or positivity invariants fail."""
        rho = self.data
        herm = np.abs(rho - rho.conj().T).max()
        if herm > herm_tol:
            raise ValueError(f"density matrix not Hermitian (|rho - rho^+| = {herm:.2e})")
        tr = np.trace(rho).real
        if abs(tr - 1) > trace_tol:
            raise ValueError(f"trace {tr!r} differs from 1")
        emin = np.linalg.eigvalsh(rho).min()
        if emin < -eig_tol:
            raise PositivityError(f"negative eigenvalue {emin:.3e}")
        return self


def pure_state(psi, space=None) -> DensityMatrix:
    psi = np.asarray(psi, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    return DensityMatrix(np.outer(psi, psi.conj()), space)


def trace_distance(a, b) -> float:
    """Half the trace norm of the difference."""
    a = a.data if isinstance(a, DensityMatrix) else a
    b = b.data if isinstance(b, DensityMatrix) else b
    diff = a - b
    return 0.5 * float(np.abs(np.linalg.eigvalsh(0.5 * (diff + diff.conj().T))).sum())


def _hermitize(rho):
    rho = 0.5 * (rho + rho.conj().T)
    return rho / np.trace(rho).real


def _as_operator(op):
    return op if sp.issparse(op) else np.asarray(op, dtype=complex)


class Liouvillian:
    """Callable ``rho -> L[rho]`` with the no-jump part precomputed.

    ``L[rho] = -i (H_eff rho - rho H_eff^+) + sum_j L_j rho L_j^+`` with
    ``H_eff = H - (i/2) sum_j L_j^+ L_j``.
    """

    def __init__(self, H, jumps):
        H = _as_operator(H)
        self.dim = H.shape[0]
        self.jumps = [_as_operator(L) for L in jumps]
        for L in self.jumps:
            if L.shape != H.shape:
                raise ValueError(f"jump operator shape {L.shape} != {H.shape}")
        decay = sum((L.conj().T @ L for L in self.jumps),
                    sp.csr_matrix(H.shape, dtype=complex) if sp.issparse(H) else 0)
        self.H = H
        self.decay = decay
        self.H_eff = H - 0.5j * decay
        if sp.issparse(self.H_eff):
            self.H_eff = sp.csr_matrix(self.H_eff)
            self._H_eff_dag = sp.csr_matrix(self.H_eff.conj().T)
        else:
            self.H_eff = np.asarray(self.H_eff)
            self._H_eff_dag = self.H_eff.conj().T
        self._jumps_dag = [sp.csr_matrix(L.conj().T) if sp.issparse(L) else L.conj().T
                           for L in self.jumps]

    def __call__(self, rho):
        rho = np.asarray(rho)
        if rho.shape != (self.dim, self.dim):
            raise ValueError(f"rho shape {rho.shape} does not match generator dim {self.dim}")
        out = -1j * (self.H_eff @ rho)
        # rho @ H_eff^+ computed as (H_eff rho^+)^+ to keep sparse @ dense
        out += 1j * (self.H_eff @ rho.conj().T).conj().T
        for L in self.jumps:
            out += L @ (L @ rho.conj().T).conj().T
        return out

    def jump_part(self, rho):
        out = np.zeros_like(rho, dtype=complex)
        for L in self.jumps:
            out += L @ (L @ rho.conj().T).conj().T
        return out


def apply_liouvillian(H, jumps, rho):
    """``-i[H, rho] + sum_j (L_j rho L_j^+ - {L_j^+ L_j, rho}/2)``."""
    data = rho.data if isinstance(rho, DensityMatrix) else rho
    return Liouvillian(H, jumps)(data)


@dataclass
class SolverSettings:
    """Integration settings; times are in units of ``1/gamma``."""

    dt: float = 0.02
    t_max: float = 5000.0
    eps_ss: float = 1e-8
    scheme: str = "rk4"
    check_interval: float = 1.0
    min_dt: float = 1e-5

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.eps_ss > 0:
            raise ValueError("eps_ss must be positive")
        if self.scheme != "rk4":
            raise ValueError(f"unsupported integration scheme {self.scheme!r}")


def _trace_norm(x):
    return float(np.abs(np.linalg.eigvalsh(0.5 * (x + x.conj().T))).sum())


def evolve_to_steady(H, jumps, rho0, settings: SolverSettings | None = None,
                     *, space=None) -> DensityMatrix:
    """Integrate ``d rho/dt = L[rho]`` with RK4 until stationary.

    Stationarity is declared when the trace-norm change over one check
    interval falls below ``eps_ss * check_interval``. Hermiticity and trace
    are monitored at every checkpoint; a positivity violation worse than
    ``1e-6`` rolls back to the previous checkpoint and halves ``dt``.

    Raises
    ------
    ConvergenceError
        If ``t_max`` is reached first. The exception carries the last
        stationarity residual.
    """
    settings = settings or SolverSettings()
    gen = Liouvillian(H, jumps)
    if isinstance(rho0, DensityMatrix):
        space = space or rho0.space
        rho = rho0.data.copy()
    else:
        rho = np.array(rho0, dtype=complex)
    dt = settings.dt
    t = 0.0
    interval = settings.check_interval
    history = []
    last_rate = np.inf
    while t < settings.t_max:
        start = rho.copy()
        n_steps = max(1, int(round(interval / dt)))
        h = interval / n_steps
        for _ in range(n_steps):
            k1 = gen(rho)
            k2 = gen(rho + 0.5 * h * k1)
            k3 = gen(rho + 0.5 * h * k2)
            k4 = gen(rho + h * k3)
            rho = rho + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            rho = 0.5 * (rho + rho.conj().T)
        herm_drift = float(np.abs(rho - rho.conj().T).max())
        trace_err = abs(np.trace(rho).real - 1.0)
        emin = np.linalg.eigvalsh(rho).min() if rho.shape[0] <= 1024 else 0.0
        if emin < -1e-6:
            if dt / 2 < settings.min_dt:
                raise ConvergenceError(f"positivity lost at dt={dt}", time=t)
            dt /= 2
            rho = start
            logger.info("positivity violation %.2e at t=%.1f, dt -> %g", emin, t, dt)
            continue
        if trace_err > 1e-8:
            raise ConvergenceError(f"trace drifted by {trace_err:.2e}", time=t)
        t += interval
        last_rate = _trace_norm(rho - start) / interval
        history.append((t, last_rate))
        if last_rate < settings.eps_ss:
            rho = _hermitize(rho)
            residual = float(np.abs(gen(rho)).max())
            return DensityMatrix(rho, space, info={
                "method": "rk4", "time": t, "dt": dt, "residual": residual,
                "rate": last_rate, "herm_drift": herm_drift,
                "settings": asdict(settings)})
    raise ConvergenceError(
        f"not stationary after t={t:g} (rate {last_rate:.2e}); raise t_max",
        residual=last_rate, time=t)


# ---------------------------------------------------------------------------
# kernel of the vectorized generator


def _csr_expand(mat, rows):
    """Nonzeros of the given rows: (position in ``rows``, column, value)."""
    mat = sp.csr_matrix(mat)
    starts = mat.indptr[rows]
    counts = mat.indptr[rows + 1] - starts
    owner = np.repeat(np.arange(len(rows)), counts)
    offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    ptr = np.repeat(starts, counts) + offsets
    return owner, mat.indices[ptr], mat.data[ptr]


def _generator_rows(gen: Liouvillian, reps):
    """Rows ``reps`` (row-major pair indices) of the vectorized generator."""
    d = gen.dim
    a, b = np.divmod(reps, d)
    owners, cols, vals = [], [], []
    # -i H_eff rho
    o, k, v = _csr_expand(gen.H_eff, a)
    owners.append(o)
    cols.append(k * d + b[o])
    vals.append(-1j * v)
    # +i rho H_eff^+  ->  (rho H_eff^+)[a, b] = sum_l rho[a, l] conj(H_eff[b, l])
    o, l, v = _csr_expand(gen.H_eff, b)
    owners.append(o)
    cols.append(a[o] * d + l)
    vals.append(1j * np.conj(v))
    for L in gen.jumps:
        Lc = sp.csr_matrix(L)
        oa, ka, va = _csr_expand(Lc, a)
        ob, kb, vb = _csr_expand(Lc, b)
        if len(oa) == 0 or len(ob) == 0:
            continue
        # pair every entry of row a with every entry of row b for the same owner
        na = np.bincount(oa, minlength=len(reps))
        nb = np.bincount(ob, minlength=len(reps))
        sa = np.concatenate([[0], np.cumsum(na)[:-1]])
        sb = np.concatenate([[0], np.cumsum(nb)[:-1]])
        npairs = na * nb
        owner = np.repeat(np.arange(len(reps)), npairs)
        local = np.arange(npairs.sum()) - np.repeat(np.cumsum(npairs) - npairs, npairs)
        ia = sa[owner] + local // nb[owner]
        ib = sb[owner] + local % nb[owner]
        owners.append(owner)
        cols.append(ka[ia] * d + kb[ib])
        vals.append(va[ia] * np.conj(vb[ib]))
    return np.concatenate(owners), np.concatenate(cols), np.concatenate(vals)


def _pair_orbits(dim, permutations):
    """Orbit label of every row-major pair index under simultaneous permutation."""
    a, b = np.divmod(np.arange(dim * dim), dim)
    canon = np.arange(dim * dim)
    for g in permutations:
        canon = np.minimum(canon, g[a] * dim + g[b])
    reps, labels = np.unique(canon, return_inverse=True)
    return reps, labels


def steady_state_nullspace(H, jumps, *, permutations=None, space=None,
                           max_unknowns=6000, rcond_floor=1e-13) -> DensityMatrix:
    """Steady state from the kernel of the vectorized generator.

    Parameters
    ----------
    H, jumps : sparse or dense matrices
    permutations : list of int arrays, optional
        Basis permutations that commute with the generator. The kernel is
        searched among matrices constant on the pair orbits of this group,
        which is exact whenever the steady state is unique.
    max_unknowns : int
        Refuse problems whose (reduced) unknown count exceeds this.

    Raises
    ------
    DegenerateSteadyStateError
        If the trace-constrained system is singular, i.e. the kernel is not
        one-dimensional.
    """
    gen = Liouvillian(H, jumps)
    d = gen.dim
    perms = [np.asarray(p) for p in (permutations or [])]
    if perms:
        reps, labels = _pair_orbits(d, perms)
    else:
        reps, labels = np.arange(d * d), np.arange(d * d)
    n = len(reps)
    if n > max_unknowns:
        raise MemoryError(
            f"{n} unknowns exceeds max_unknowns={max_unknowns}; use the krylov solver")
    owner, cols, vals = _generator_rows(gen, reps)
    A = sp.coo_matrix((vals, (owner, labels[cols])), shape=(n, n)).toarray()
    diag_labels = labels[np.arange(d) * d + np.arange(d)]
    trace_row = np.bincount(diag_labels, minlength=n).astype(complex)
    # the diagonal rows of the generator are dependent (trace preservation),
    # so one of them can carry the normalisation instead
    diag_reps = np.flatnonzero(trace_row)
    k = diag_reps[0]
    A[k, :] = trace_row
    rhs = np.zeros(n, dtype=complex)
    rhs[k] = 1.0
    anorm = np.abs(A).sum(axis=0).max()
    lu, piv = la.lu_factor(A, overwrite_a=True, check_finite=False)
    rcond, _ = lapack.zgecon(lu, anorm, norm="1")
    if rcond < rcond_floor:
        raise DegenerateSteadyStateError(
            f"steady state is not unique (rcond={rcond:.1e})")
    coeffs = la.lu_solve((lu, piv), rhs, check_finite=False)
    rho = _hermitize(coeffs[labels].reshape(d, d))
    residual = float(np.abs(gen(rho)).max())
    return DensityMatrix(rho, space, info={
        "method": "nullspace", "unknowns": n, "rcond": float(rcond),
        "residual": residual, "symmetry_order": len(perms)})


# ---------------------------------------------------------------------------
# preconditioned GMRES


class _LyapunovSolver:
    """Solves ``A X + X A^+ = Y`` for fixed ``A`` (shifted to be stable)."""

    def __init__(self, A, shift=0.0):
        A = np.asarray(A, dtype=complex) - 0.5 * shift * np.eye(A.shape[0])
        self.mode = "eig"
        w, V = la.eig(A)
        cond = np.linalg.cond(V)
        denom = w[:, None] + np.conj(w)[None, :]
        if cond < 1e6 and np.abs(denom).min() > 1e-10:
            self.w, self.V, self.Vinv = w, V, la.inv(V)
            self.denom = denom
        else:
            self.mode = "schur"
            self.T, self.Q = la.schur(A, output="complex")

    def solve(self, Y):
        if self.mode == "eig":
            Yt = self.Vinv @ Y @ self.Vinv.conj().T
            return self.V @ (Yt / self.denom) @ self.V.conj().T
        Yt = self.Q.conj().T @ Y @ self.Q
        X, scale, info = lapack.ztrsyl(self.T, self.T, Yt, trana="N", tranb="C")
        if info < 0:
            raise RuntimeError(f"trsyl failed with info={info}")
        return self.Q @ (X / scale) @ self.Q.conj().T


def steady_state_krylov(H, jumps, *, rho0=None, space=None, tol=1e-12,
                        restart=60, maxiter=40, residual_tol=1e-9,
                        max_dim=4096) -> DensityMatrix:
    """Steady state by GMRES on the Lyapunov-preconditioned generator.

    With ``P[X] = A X + X A^+`` (``A = -i H_eff``, shifted if some mode does
    not decay) the generator is ``P + J`` where ``J`` collects the jump
    terms. The trace constraint is added as a rank-one term, which makes the
    system regular when the steady state is unique:
    ``(I + P^{-1} (J + w tr)) rho = P^{-1} w``.
    """
    gen = Liouvillian(H, jumps)
    d = gen.dim
    if d > max_dim:
        raise MemoryError(f"dim {d} exceeds max_dim={max_dim} for the dense krylov solver")
    H_eff = gen.H_eff.toarray() if sp.issparse(gen.H_eff) else gen.H_eff
    A = -1j * H_eff
    decay = -np.linalg.eigvals(A).real.max()
    shift = 0.0 if decay > 1e-6 else 0.1 * max(1.0, abs(np.trace(gen.decay.toarray() if sp.issparse(gen.decay) else gen.decay)) / d)
    lyap = _LyapunovSolver(A, shift)
    w = np.eye(d, dtype=complex) / d

    def extra(rho):
        out = gen.jump_part(rho) + np.trace(rho) * w
        if shift:
            out += shift * rho
        return out

    def matvec(x):
        rho = x.reshape(d, d)
        return (rho + lyap.solve(extra(rho))).ravel()

    op = spla.LinearOperator((d * d, d * d), matvec=matvec, dtype=complex)
    b = lyap.solve(w).ravel()
    x0 = None if rho0 is None else np.asarray(
        rho0.data if isinstance(rho0, DensityMatrix) else rho0, dtype=complex).ravel()
    x, info = spla.gmres(op, b, x0=x0, rtol=tol, atol=0.0, restart=restart, maxiter=maxiter)
    rho = _hermitize(x.reshape(d, d))
    residual = float(np.abs(gen(rho)).max())
    if residual > residual_tol:
        raise ConvergenceError(
            f"GMRES did not converge (info={info}, residual {residual:.2e})",
            residual=residual)
    return DensityMatrix(rho, space, info={
        "method": "krylov", "residual": residual, "gmres_info": int(info),
        "lyapunov": lyap.mode, "shift": shift})


# ---------------------------------------------------------------------------


@dataclass
class SpectralDecomposition:
    """Eigen-decomposition of a density matrix, probabilities descending."""

    probabilities: np.ndarray
    vectors: np.ndarray
    p_floor: float = 1e-12

    @property
    def support(self) -> np.ndarray:
        return self.probabilities[self.probabilities > self.p_floor]


def spectral_decomposition(rho, p_floor: float = 1e-12,
                           negative_tol: float = 1e-8) -> SpectralDecomposition:
    """Dense Hermitian eigen-decomposition with small negative noise clamped.

    Raises
    ------
    PositivityError
        If an eigenvalue lies below ``-negative_tol``.
    """
    data = rho.data if isinstance(rho, DensityMatrix) else np.asarray(rho)
    p, V = np.linalg.eigh(0.5 * (data + data.conj().T))
    if p.min() < -negative_tol:
        raise PositivityError(f"density matrix has eigenvalue {p.min():.3e}")
    order = np.argsort(-p, kind="stable")
    p = np.clip(p[order], 0.0, None)
    return SpectralDecomposition(p, V[:, order], p_floor)


def solve_steady_state(spec: LatticeSpec, method: str = "auto", *,
                       settings: SolverSettings | None = None,
                       rho0=None) -> DensityMatrix:
    """Full-space steady state of ``spec`` with the chosen exact method.

    ``auto`` picks the symmetry-reduced kernel solve, which is exact for the
    translation- and point-group-invariant problems of this model.
    """
    H = build_hamiltonian(spec)
    jumps = build_jump_operators(spec)
    space = FullSpace(spec.n_sites)
    if method in ("auto", "nullspace"):
        perms = [basis_permutation(p, spec.n_sites) for p in lattice_permutations(spec)]
        rho = steady_state_nullspace(H, jumps, permutations=perms, space=space)
    elif method == "nullspace-plain":
        rho = steady_state_nullspace(H, jumps, space=space)
    elif method == "krylov":
        rho = steady_state_krylov(H, jumps, rho0=rho0, space=space)
    elif method in ("evolve", "rk4"):
        if rho0 is None:
            rho0 = np.zeros((spec.dim, spec.dim), dtype=complex)
            rho0[0, 0] = 1.0
        rho = evolve_to_steady(H, jumps, rho0, settings, space=space)
    else:
        raise ValueError(f"unknown method {method!r}")
    rho.info["spec"] = spec.as_dict()
    return rho.check()


# ---------------------------------------------------------------------------
# snapshot files

_MAGIC = b"DMAT"


def save_density_matrix(rho: DensityMatrix, path, provenance: dict | None = None):
    """Binary snapshot (header + row-major complex128) plus a JSON sidecar."""
    path = Path(path)
    order = b"<" if sys.byteorder == "little" else b">"
    with open(path, "wb") as fh:
        fh.write(_MAGIC + order)
        fh.write(np.array([rho.dim], dtype=order.decode() + "u8").tobytes())
        fh.write(np.ascontiguousarray(rho.data, dtype=order.decode() + "c16").tobytes())
    sidecar = {"dim": rho.dim, "byte_order": order.decode(), **_jsonable(rho.info)}
    if provenance:
        sidecar.update(_jsonable(provenance))
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_density_matrix(path, space=None) -> DensityMatrix:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path} is not a density-matrix snapshot")
    order = raw[4:5].decode()
    dim = int(np.frombuffer(raw[5:13], dtype=order + "u8")[0])
    data = np.frombuffer(raw[13:], dtype=order + "c16").reshape(dim, dim)
    info = {}
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        info = json.loads(sidecar.read_text())
    return DensityMatrix(data.astype(complex), space, info=info)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj
