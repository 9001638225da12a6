"""
Steady-state observables: magnetization, linear susceptibility, entropy,
quantum Fisher information and negativity.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import ellipe

from .lattice import LatticeSpec
from .master import DensityMatrix, FullSpace, SpectralDecomposition, spectral_decomposition

__all__ = [
    "MagnetizationVector", "SusceptibilityTensor", "EntanglementRecord",
    "NonlinearResponseWarning", "UnsupportedSpaceError", "magnetization",
    "susceptibility_tensor", "angular_average", "von_neumann_entropy",
    "quantum_fisher_information", "qfi_coefficients", "negativity",
    "partial_transpose", "collective_operator", "default_bipartition",
]

logger = logging.getLogger(__name__)

IMAG_TOL = 1e-9


class NonlinearResponseWarning(UserWarning):
    """The magnetization curve bends noticeably over the fitted fields."""


class UnsupportedSpaceError(ValueError):
    pass


@dataclass
class MagnetizationVector:
    mx: float
    my: float
    mz: float
    stderr: tuple | None = None

    @property
    def in_plane(self) -> float:
        return float(np.hypot(self.mx, self.my))

    def as_array(self):
        return np.array([self.mx, self.my, self.mz])


@dataclass
class SusceptibilityTensor:
    """``chi[a, b] = dM_a / dh_b`` at zero field, with fit errors."""

    chi: np.ndarray
    stderr: np.ndarray
    nonlinearity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    fields: np.ndarray = None
    samples: np.ndarray = None  # M_a(h) per field direction: (2, n_fields, 2)

    @property
    def xx(self):
        return self.chi[0, 0]

    @property
    def xy(self):
        return self.chi[0, 1]

    @property
    def yx(self):
        return self.chi[1, 0]

    @property
    def yy(self):
        return self.chi[1, 1]


@dataclass
class EntanglementRecord:
    entropy: float
    qfi: float
    tau_star: float
    negativity: float | None = None


def _space_of(rho, spec=None):
    if rho.space is not None:
        return rho.space
    return FullSpace(spec.n_sites)


def _site_labels(space):
    return list(getattr(space, "sites", range(space.n_sites)))


def _real_expectation(rho, op, what):
    val = rho.expect(op)
    if abs(val.imag) > IMAG_TOL:
        raise ValueError(f"<{what}> has imaginary part {val.imag:.2e}; rho is not Hermitian")
    return val.real


def magnetization(rho: DensityMatrix, spec: LatticeSpec | None = None) -> MagnetizationVector:
    """Per-site averaged ``<sigma^a>``; works in full or corner space."""
    space = _space_of(rho, spec)
    sites = _site_labels(space)
    m = [sum(_real_expectation(rho, space.site_operator(j, w), f"sigma^{w}_{j}")
             for j in sites) / len(sites) for w in "xyz"]
    stderr = None
    est = rho.info.get("magnetization_stderr")
    if est is not None:
        stderr = tuple(est)
    return MagnetizationVector(*m, stderr=stderr)


def collective_operator(space, tau):
    """``(1/2) sum_j (cos tau sigma^x_j + sin tau sigma^y_j)``."""
    sites = _site_labels(space)
    ox = sum(space.site_operator(j, "x") for j in sites)
    oy = sum(space.site_operator(j, "y") for j in sites)
    return 0.5 * (np.cos(tau) * ox + np.sin(tau) * oy)


def susceptibility_tensor(solver, spec: LatticeSpec, h0: float = 0.01,
                          n_fields: int = 4, nonlinearity_threshold: float = 0.05
                          ) -> SusceptibilityTensor:
    """Linear in-plane response from ``n_fields`` finite-field solves per axis.

    For each field direction the steady state is solved at
    ``h = h0, 2 h0, ..., n_fields h0`` and ``M_a(h)`` is fitted by a straight
    line through the origin (``M(0) = 0`` by the Z2 symmetry).

    The standard error combines the larger of the fit-residual and the
    propagated solver error with the finite-field bias, estimated as the
    gap between the origin slope and the ``h -> 0`` intercept of
    ``M/h = chi + c h^2``.

    Parameters
    ----------
    solver : callable
        ``solver(spec) -> DensityMatrix``.
    nonlinearity_threshold : float
        A :class:`NonlinearResponseWarning` is issued when the cubic
        correction at the largest field exceeds this fraction of the linear
        response.
    """
    hs = h0 * np.arange(1, n_fields + 1)
    chi = np.zeros((2, 2))
    err = np.zeros((2, 2))
    nonlin = np.zeros(2)
    samples = np.zeros((2, n_fields, 2))
    for beta, theta in enumerate((0.0, np.pi / 2)):
        M = np.zeros((n_fields, 2))
        Merr = np.zeros((n_fields, 2))
        for k, h in enumerate(hs):
            rho = solver(spec.with_(h=float(h), theta=theta))
            mag = magnetization(rho, spec)
            M[k] = mag.mx, mag.my
            if mag.stderr is not None:
                Merr[k] = mag.stderr[:2]
        samples[beta] = M
        s2 = hs @ hs
        chi[:, beta] = hs @ M / s2
        resid = M - np.outer(hs, chi[:, beta])
        fit_var = (resid ** 2).sum(axis=0) / max(n_fields - 1, 1) / s2
        prop_var = (hs ** 2) @ (Merr ** 2) / s2 ** 2
        bias = np.zeros(2)
        if n_fields >= 2:
            # M/h = chi + c h^2: the intercept removes the leading finite-field bias
            design = np.column_stack([np.ones(n_fields), hs ** 2])
            coef, *_ = np.linalg.lstsq(design, M / hs[:, None], rcond=None)
            bias = np.abs(chi[:, beta] - coef[0])
            scale = np.hypot(*chi[:, beta])
            if scale > 0:
                nonlin[beta] = np.hypot(*coef[1]) * hs[-1] ** 2 / scale
        err[:, beta] = np.sqrt(np.maximum(fit_var, prop_var) + bias ** 2)
        if nonlin[beta] > nonlinearity_threshold:
            warnings.warn(
                f"response along {'xy'[beta]} is {nonlin[beta]:.1%} nonlinear "
                f"at h={hs[-1]:g}; reduce h0", NonlinearResponseWarning, stacklevel=2)
    return SusceptibilityTensor(chi, err, nonlin, hs, samples)


def angular_average(chi, n_points: int = 512, method: str = "elliptic") -> float:
    """Mean over field angles of ``|chi . (cos t, sin t)|``.

    With singular values ``s1 >= s2`` of ``chi`` the integrand is
    ``sqrt(s1^2 cos^2 + s2^2 sin^2)`` in the principal frame, so the mean is
    ``(2/pi) s1 E(1 - s2^2/s1^2)`` with ``E`` the complete elliptic integral
    of the second kind. ``method="trapezoid"`` uses the periodic
    ``n_points`` rule instead, which converges only as ``n^-2`` when
    ``chi`` is singular (the integrand then has kinks).
    """
    c = chi.chi if isinstance(chi, SusceptibilityTensor) else np.asarray(chi, dtype=float)
    if method == "trapezoid":
        t = 2 * np.pi * np.arange(n_points) / n_points
        resp = c @ np.vstack([np.cos(t), np.sin(t)])
        return float(np.hypot(resp[0], resp[1]).mean())
    if method != "elliptic":
        raise ValueError(f"unknown method {method!r}")
    s1, s2 = np.linalg.svd(c, compute_uv=False)
    if s1 == 0:
        return 0.0
    return float(2 / np.pi * s1 * ellipe(1.0 - (s2 / s1) ** 2))


def von_neumann_entropy(decomp) -> float:
    """``-sum p ln p`` over probabilities above the floor, in nats."""
    if isinstance(decomp, DensityMatrix):
        decomp = spectral_decomposition(decomp)
    p = decomp.support
    return float(-(p * np.log(p)).sum()) + 0.0


def qfi_coefficients(decomp: SpectralDecomposition, space):
    """``(a, b, c)`` with ``F_Q(tau) = a cos^2 + b sin^2 + 2 c sin cos``."""
    p = np.where(decomp.probabilities > decomp.p_floor, decomp.probabilities, 0.0)
    V = decomp.vectors
    sites = _site_labels(space)
    ox = 0.5 * sum(space.site_operator(j, "x") for j in sites)
    oy = 0.5 * sum(space.site_operator(j, "y") for j in sites)
    A = V.conj().T @ (ox @ V)
    B = V.conj().T @ (oy @ V)
    psum = p[:, None] + p[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        W = np.where(psum > 0, 2 * (p[:, None] - p[None, :]) ** 2 / psum, 0.0)
    a = float((W * np.abs(A) ** 2).sum())
    b = float((W * np.abs(B) ** 2).sum())
    c = float((W * (A.conj() * B).real).sum())
    return a, b, c


def quantum_fisher_information(decomp, space, tau_grid: int = 64, xtol: float = 1e-4):
    """Maximum over ``tau`` of the QFI for the in-plane collective spin.

    ``space`` is a state space or a :class:`LatticeSpec` (full space).
    Returns ``(F_Q, tau_star)`` with ``tau_star`` in ``[0, pi)``.
    """
    if isinstance(space, LatticeSpec):
        space = FullSpace(space.n_sites)
    if isinstance(decomp, DensityMatrix):
        space = decomp.space if space is None else space
        decomp = spectral_decomposition(decomp)
    a, b, c = qfi_coefficients(decomp, space)

    def fq(t):
        return a * np.cos(t) ** 2 + b * np.sin(t) ** 2 + 2 * c * np.sin(t) * np.cos(t)

    grid = np.pi * np.arange(tau_grid) / tau_grid
    vals = fq(grid)
    k = int(np.argmax(vals))
    if np.ptp(vals) < 1e-14 * max(1.0, abs(vals[k])):
        return float(vals[k]), float(grid[k])
    step = np.pi / tau_grid
    res = minimize_scalar(lambda t: -fq(t), bounds=(grid[k] - step, grid[k] + step),
                          method="bounded", options={"xatol": xtol})
    tau = float(res.x) % np.pi
    best = float(fq(tau))
    if best < vals[k]:
        return float(vals[k]), float(grid[k])
    return best, tau


def default_bipartition(spec: LatticeSpec):
    """Sites in the left half of the columns."""
    half = spec.lx // 2 if spec.lx > 1 else 0
    if half == 0:
        # single column: split rows instead
        return [spec.site_index(0, y) for y in range(spec.ly // 2)]
    return [spec.site_index(x, y) for y in range(spec.ly) for x in range(half)]


def partial_transpose(rho, sites, n_sites):
    """Transpose the tensor factors of ``sites`` (site 0 = least significant bit)."""
    data = rho.data if isinstance(rho, DensityMatrix) else np.asarray(rho)
    t = data.reshape((2,) * (2 * n_sites))
    axes = list(range(2 * n_sites))
    for s in sites:
        row, col = n_sites - 1 - s, 2 * n_sites - 1 - s
        axes[row], axes[col] = axes[col], axes[row]
    return t.transpose(axes).reshape(data.shape)


def negativity(rho: DensityMatrix, sites=None, spec: LatticeSpec | None = None) -> float:
    """Sum of the absolute negative eigenvalues of the partial transpose.

    Only defined on full-space states; corner-space states are refused
    because truncation errors are amplified by the partial transpose.
    """
    space = rho.space
    if space is not None and not getattr(space, "is_full", False):
        raise UnsupportedSpaceError("negativity requires a full-space density matrix")
    n = int(round(np.log2(rho.dim)))
    if sites is None:
        if spec is None:
            sites = list(range(n // 2))
        else:
            sites = default_bipartition(spec)
    pt = partial_transpose(rho, sites, n)
    ev = np.linalg.eigvalsh(0.5 * (pt + pt.conj().T))
    return float(-ev[ev < 0].sum()) + 0.0
