"""
Corner-space renormalization.

The lattice is split into column strips that are solved exactly. Blocks are
then merged pairwise: the corner space of a merge is spanned by the ``M_C``
most probable products ``|phi_i^A> (x) |phi_j^B>`` of the two blocks'
steady-state eigenvectors, the merged generator is projected on it, and the
steady state is solved again inside the corner.

Each block keeps its Hamiltonian and the ``sigma^-`` / ``sigma^z`` operators
of its sites in its own representation basis, so projected operators of a
merge are assembled from the product structure without ever building the
full Hilbert space. A block's Hamiltonian always holds every bond of the
target lattice whose two ends lie inside the block; wrap bonds in ``x``
therefore appear only at the merge that closes the ring.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .lattice import LatticeSpec, enumerate_edges, hamiltonian_from_bonds, site_operator
from .master import (ConvergenceError, DensityMatrix, SpectralDecomposition,
                     spectral_decomposition, steady_state_krylov, steady_state_nullspace)
from .trajectories import EnsembleSettings, ensemble_density_matrix

__all__ = [
    "CornerBasis", "MergeStep", "MergePlan", "CornerSettings", "CornerSpace",
    "Block", "merge_corner", "project_operator", "project_product",
    "solve_strip", "merge_blocks", "corner_steady_state",
    "converge_in_corner_dim", "CornerConvergenceError", "ConvergenceTrace",
    "TruncationWarning",
]

logger = logging.getLogger(__name__)


class TruncationWarning(UserWarning):
    pass


class CornerConvergenceError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class CornerBasis:
    """Retained product states of a merge, ranked by joint probability."""

    m_c: int
    dim_a: int
    dim_b: int
    pairs: np.ndarray          # (m_c, 2) indices into the parents' eigenbases
    weights: np.ndarray        # p_i^A p_j^B, descending
    vectors_a: np.ndarray      # parent eigenvectors (columns) in A's basis
    vectors_b: np.ndarray

    @property
    def retained_weight(self) -> float:
        return float(self.weights.sum())

    def isometry(self) -> np.ndarray:
        """Dense ``(dim_a * dim_b, m_c)`` matrix; A occupies the low bits."""
        cols = [np.kron(self.vectors_b[:, j], self.vectors_a[:, i]) for i, j in self.pairs]
        return np.column_stack(cols)


def _tie_key(w, rtol=1e-12):
    # snap runs of nearly equal weights to their largest member
    order = np.argsort(-w, kind="stable")
    ws = w[order]
    snapped = ws.copy()
    for k in range(1, len(ws)):
        if snapped[k - 1] - ws[k] <= rtol * snapped[k - 1]:
            snapped[k] = snapped[k - 1]
    out = np.empty_like(w)
    out[order] = snapped
    return out


def merge_corner(decomp_a: SpectralDecomposition, decomp_b: SpectralDecomposition,
                 m_c: int) -> CornerBasis:
    """Keep the ``m_c`` product pairs with the largest ``p_i^A p_j^B``.

    Ties are broken lexicographically on ``(i, j)``; weights equal to a
    relative ``1e-12`` count as tied, so rounding noise in degenerate spectra
    does not decide the order. Asking for more states than the product space
    holds clamps ``m_c`` with a warning.
    """
    pa, pb = decomp_a.probabilities, decomp_b.probabilities
    full = len(pa) * len(pb)
    if m_c > full:
        warnings.warn(f"corner dimension {m_c} clamped to {full}", TruncationWarning,
                      stacklevel=2)
        m_c = full
    if m_c < 1:
        raise ValueError("corner dimension must be >= 1")
    # only the first m_c states of either side can enter the top m_c pairs
    ka, kb = min(len(pa), m_c), min(len(pb), m_c)
    w = np.outer(pa[:ka], pb[:kb])
    ii, jj = np.meshgrid(np.arange(ka), np.arange(kb), indexing="ij")
    key = -_tie_key(w.ravel())
    order = np.lexsort((jj.ravel(), ii.ravel(), key))[:m_c]
    pairs = np.column_stack([ii.ravel()[order], jj.ravel()[order]])
    return CornerBasis(m_c, len(pa), len(pb), pairs, w.ravel()[order],
                       decomp_a.vectors, decomp_b.vectors)


def project_operator(op, basis: CornerBasis) -> np.ndarray:
    """``B^+ op B`` for an operator on the merged product space."""
    if op.shape != (basis.dim_a * basis.dim_b,) * 2:
        raise ValueError(f"operator shape {op.shape} does not match "
                         f"{basis.dim_a} x {basis.dim_b} product space")
    B = basis.isometry()
    return B.conj().T @ (op @ B)


def project_product(op_a, op_b, basis: CornerBasis) -> np.ndarray:
    """Corner matrix of ``op_a (x) op_b`` given both factors in eigenbasis form.

    ``None`` stands for the identity factor.
    """
    i, j = basis.pairs[:, 0], basis.pairs[:, 1]
    left = (i[:, None] == i[None, :]).astype(complex) if op_a is None else op_a[np.ix_(i, i)]
    right = (j[:, None] == j[None, :]).astype(complex) if op_b is None else op_b[np.ix_(j, j)]
    return left * right


class CornerSpace:
    """Site operators represented in a corner basis."""

    is_full = False

    def __init__(self, n_sites, sm, sz, sites=None):
        self.n_sites = n_sites
        self.sites = list(range(n_sites)) if sites is None else list(sites)
        self._sm = sm
        self._sz = sz
        self.dim = next(iter(sm.values())).shape[0]

    def site_operator(self, site, which):
        sm = self._sm[site]
        if which == "minus":
            return sm
        if which == "plus":
            return sm.conj().T
        if which == "x":
            return sm + sm.conj().T
        if which == "y":
            return 1j * (sm - sm.conj().T)
        if which == "z":
            return self._sz[site]
        raise ValueError(f"unknown operator {which!r}")


@dataclass
class Block:
    """A solved sublattice in its own representation basis."""

    sites: list
    H: np.ndarray
    sm: dict
    sz: dict
    rho: DensityMatrix = None
    decomp: SpectralDecomposition = None
    info: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    def space(self) -> CornerSpace:
        return CornerSpace(len(self.sites), self.sm, self.sz, self.sites)

    def in_eigenbasis(self, op, keep):
        V = self.decomp.vectors[:, :keep]
        return V.conj().T @ (op @ V)


@dataclass
class MergeStep:
    left: tuple
    right: tuple
    union: tuple
    cross_edges: list
    m_c: int


@dataclass
class MergePlan:
    strips: list
    steps: list

    @classmethod
    def columns(cls, spec: LatticeSpec, m_c) -> "MergePlan":
        """Column strips merged pairwise, left to right, level by level.

        ``m_c`` is an int or a per-step list.
        """
        blocks = [tuple(spec.site_index(x, y) for y in range(spec.ly)) for x in range(spec.lx)]
        strips = list(blocks)
        pairs = []
        while len(blocks) > 1:
            nxt = []
            for k in range(0, len(blocks) - 1, 2):
                pairs.append((blocks[k], blocks[k + 1]))
                nxt.append(blocks[k] + blocks[k + 1])
            if len(blocks) % 2:
                nxt.append(blocks[-1])
            blocks = nxt
        schedule = list(m_c) if np.ndim(m_c) else [int(m_c)] * len(pairs)
        if len(schedule) != len(pairs):
            raise ValueError(f"need {len(pairs)} corner dimensions, got {len(schedule)}")
        edges = [(e.a, e.b) for e in enumerate_edges(spec)]
        steps = []
        for (a, b), mc in zip(pairs, schedule):
            sa, sb = set(a), set(b)
            cross = [(u, v) for u, v in edges if (u in sa and v in sb) or (u in sb and v in sa)]
            steps.append(MergeStep(a, b, a + b, cross, int(mc)))
        plan = cls(strips, steps)
        plan.validate(spec)
        return plan

    def validate(self, spec):
        union = self.steps[-1].union if self.steps else self.strips[0]
        if sorted(union) != list(range(spec.n_sites)):
            raise ValueError("merge plan does not cover the lattice")
        covered = []
        for strip in self.strips:
            covered += _internal_bonds(spec, strip)
        for step in self.steps:
            covered += step.cross_edges
        want = sorted(tuple(sorted(e)) for e in ((e.a, e.b) for e in enumerate_edges(spec)))
        if sorted(tuple(sorted(e)) for e in covered) != want:
            raise ValueError("merge plan does not activate every bond exactly once")


def _internal_bonds(spec, sites):
    s = set(sites)
    return [(e.a, e.b) for e in enumerate_edges(spec) if e.a in s and e.b in s]


@dataclass
class CornerSettings:
    master_limit: int = 4096
    weight_floor: float = 0.9
    ensemble: EnsembleSettings = field(default_factory=EnsembleSettings)
    checkpoint_dir: str | None = None


def _solve_operators(H, jumps, space, settings, psi0=None):
    d = H.shape[0]
    if d < settings.master_limit:
        if d * d <= 4096:
            rho = steady_state_nullspace(H, jumps, space=space)
        else:
            rho = steady_state_krylov(H, jumps, space=space, max_dim=settings.master_limit)
    else:
        rho = ensemble_density_matrix((H, jumps), settings.ensemble, space=space, psi0=psi0,
                                      max_dim=max(d, settings.master_limit))
    return rho.check()


def solve_strip(spec: LatticeSpec, sites, settings: CornerSettings | None = None) -> Block:
    """Exact steady state of a sublattice with its internal bonds and the field."""
    settings = settings or CornerSettings()
    sites = list(sites)
    local = {s: k for k, s in enumerate(sites)}
    bonds = [(local[a], local[b]) for a, b in _internal_bonds(spec, sites)]
    n = len(sites)
    H = hamiltonian_from_bonds(n, bonds, spec.jx, spec.jy, spec.jz, spec.h, spec.theta)
    sm = {s: site_operator(n, local[s], "minus").toarray() for s in sites}
    sz = {s: site_operator(n, local[s], "z").toarray() for s in sites}
    block = Block(sites, H.toarray(), sm, sz)
    jumps = [np.sqrt(spec.gamma) * sp.csr_matrix(sm[s]) for s in sites]
    block.rho = _solve_operators(H, jumps, block.space(), settings)
    block.decomp = spectral_decomposition(block.rho)
    block.info = {"dim": block.dim, "method": block.rho.info.get("method")}
    return block


def merge_blocks(spec: LatticeSpec, a: Block, b: Block, step: MergeStep,
                 settings: CornerSettings | None = None):
    """Project the merged problem on the corner of ``a`` and ``b`` and solve it."""
    settings = settings or CornerSettings()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        basis = merge_corner(a.decomp, b.decomp, step.m_c)
    ka = int(basis.pairs[:, 0].max()) + 1
    kb = int(basis.pairs[:, 1].max()) + 1
    ea = {k: a.in_eigenbasis(v, ka) for k, v in (("H", a.H),)}
    eb = {k: b.in_eigenbasis(v, kb) for k, v in (("H", b.H),)}
    sm_a = {s: a.in_eigenbasis(a.sm[s], ka) for s in a.sites}
    sz_a = {s: a.in_eigenbasis(a.sz[s], ka) for s in a.sites}
    sm_b = {s: b.in_eigenbasis(b.sm[s], kb) for s in b.sites}
    sz_b = {s: b.in_eigenbasis(b.sz[s], kb) for s in b.sites}

    H = project_product(ea["H"], None, basis) + project_product(None, eb["H"], basis)
    for u, v in step.cross_edges:
        if u in sm_b:
            u, v = v, u
        for coupling, which in ((spec.jx, "x"), (spec.jy, "y"), (spec.jz, "z")):
            if coupling == 0:
                continue
            H += coupling * project_product(_pauli(sm_a[u], sz_a[u], which),
                                            _pauli(sm_b[v], sz_b[v], which), basis)
    sm = {s: project_product(sm_a[s], None, basis) for s in a.sites}
    sm.update({s: project_product(None, sm_b[s], basis) for s in b.sites})
    sz = {s: project_product(sz_a[s], None, basis) for s in a.sites}
    sz.update({s: project_product(None, sz_b[s], basis) for s in b.sites})
    sites = list(a.sites) + list(b.sites)
    merged = Block(sites, H, sm, sz)
    jumps = [np.sqrt(spec.gamma) * sp.csr_matrix(sm[s]) for s in sites]
    psi0 = np.zeros(basis.m_c, dtype=complex)
    psi0[0] = 1.0
    merged.rho = _solve_operators(H, jumps, merged.space(), settings, psi0)
    merged.decomp = spectral_decomposition(merged.rho)
    merged.info = {"m_c": basis.m_c, "retained_weight": basis.retained_weight,
                   "method": merged.rho.info.get("method"),
                   "residual": merged.rho.info.get("residual")}
    if basis.retained_weight < settings.weight_floor:
        merged.info["warning"] = (f"retained weight {basis.retained_weight:.3f} below "
                                  f"floor {settings.weight_floor}")
        logger.warning("merge %s: %s", step.union, merged.info["warning"])
    return merged, basis


def _pauli(sm, sz, which):
    if which == "x":
        return sm + sm.conj().T
    if which == "y":
        return 1j * (sm - sm.conj().T)
    return sz


def _checkpoint_path(settings, spec, plan, index):
    if not settings.checkpoint_dir:
        return None
    payload = json.dumps({"spec": spec.as_dict(),
                          "steps": [(s.union, s.m_c) for s in plan.steps[:index + 1]],
                          "master_limit": settings.master_limit,
                          "ensemble": asdict(settings.ensemble)}, sort_keys=True, default=str)
    key = hashlib.sha256(payload.encode()).hexdigest()[:16]
    return Path(settings.checkpoint_dir) / f"corner_step{index:02d}_{key}.npz"


def _save_block(block, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"sites": np.array(block.sites), "H": block.H, "rho": block.rho.data,
              "info": np.array(json.dumps(block.info, default=str))}
    for s in block.sites:
        arrays[f"sm_{s}"] = block.sm[s]
        arrays[f"sz_{s}"] = block.sz[s]
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def _load_block(path):
    data = np.load(path, allow_pickle=False)
    sites = [int(s) for s in data["sites"]]
    sm = {s: data[f"sm_{s}"] for s in sites}
    sz = {s: data[f"sz_{s}"] for s in sites}
    block = Block(sites, data["H"], sm, sz, info=json.loads(str(data["info"])))
    block.rho = DensityMatrix(data["rho"], block.space(), info={"method": "checkpoint"})
    block.decomp = spectral_decomposition(block.rho)
    return block


def corner_steady_state(spec: LatticeSpec, plan: MergePlan | int | None = None,
                        settings: CornerSettings | None = None):
    """Run the merge plan; returns ``(rho, diagnostics)``.

    ``plan`` may be a :class:`MergePlan` or a corner dimension used at every
    merge of the default column plan. ``rho.space`` is a
    :class:`CornerSpace`, so observables can be evaluated directly.
    """
    settings = settings or CornerSettings()
    if plan is None:
        plan = MergePlan.columns(spec, 4 ** spec.ly)
    elif not isinstance(plan, MergePlan):
        plan = MergePlan.columns(spec, plan)
    plan.validate(spec)
    blocks = {}
    diagnostics = {"strips": [], "steps": [], "plan": [(s.left, s.right, s.m_c) for s in plan.steps]}
    needed = set(plan.strips)
    for idx, step in enumerate(plan.steps):
        path = _checkpoint_path(settings, spec, plan, idx)
        if path is not None and path.exists():
            needed.discard(step.left)
            needed.discard(step.right)
    for strip in plan.strips:
        if strip in needed or not plan.steps:
            blocks[strip] = solve_strip(spec, strip, settings)
            diagnostics["strips"].append({"sites": strip, **blocks[strip].info})
    for idx, step in enumerate(plan.steps):
        path = _checkpoint_path(settings, spec, plan, idx)
        if path is not None and path.exists():
            merged = _load_block(path)
            merged.info["resumed"] = True
        else:
            merged, _ = merge_blocks(spec, blocks[step.left], blocks[step.right], step, settings)
            if path is not None:
                _save_block(merged, path)
        blocks.pop(step.left, None)
        blocks.pop(step.right, None)
        blocks[step.union] = merged
        diagnostics["steps"].append({"union": step.union, **merged.info})
    final = blocks[plan.steps[-1].union if plan.steps else plan.strips[0]]
    rho = final.rho
    rho.info["corner"] = diagnostics
    rho.info.setdefault("spec", spec.as_dict())
    return rho, diagnostics


@dataclass
class ConvergenceTrace:
    m_c: list = field(default_factory=list)
    values: list = field(default_factory=list)
    stderr: list = field(default_factory=list)
    converged: bool = False


def _default_observable(rho):
    from .observables import magnetization
    return magnetization(rho).mz


def converge_in_corner_dim(spec: LatticeSpec, schedule, observable=None, tol=1e-3,
                           settings: CornerSettings | None = None, plan_factory=None):
    """Increase the corner dimension until ``observable`` stops changing.

    ``observable(rho)`` returns a value or ``(value, stderr)``; the default
    is ``M_z``. Converged when successive values differ by less than ``tol``
    plus their combined standard error. Returns ``(rho, trace)``.
    """
    observable = observable or _default_observable
    plan_factory = plan_factory or (lambda m: MergePlan.columns(spec, m))
    schedule = list(schedule)
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("corner schedule must be strictly increasing")
    trace = ConvergenceTrace()
    rho = None
    for m in schedule:
        rho, _ = corner_steady_state(spec, plan_factory(m), settings)
        out = observable(rho)
        value, err = out if isinstance(out, tuple) else (out, 0.0)
        trace.m_c.append(m)
        trace.values.append(float(value))
        trace.stderr.append(float(err))
        if len(trace.values) >= 2:
            diff = abs(trace.values[-1] - trace.values[-2])
            noise = np.hypot(trace.stderr[-1], trace.stderr[-2])
            if diff < tol + noise:
                trace.converged = True
                return rho, trace
    raise CornerConvergenceError(
        f"no convergence to {tol} over corner dimensions {schedule}", trace)
