"""
Lattice geometry and many-body operators for the dissipative XYZ model.

Basis convention: computational z-basis, site 0 is the least significant
bit of the basis index, bit 0 is spin down and bit 1 is spin up. Site
``(x, y)`` has index ``x + lx * y``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "LatticeSpec", "Edge", "enumerate_edges", "site_operator",
    "build_hamiltonian", "build_jump_operators", "field_operator",
    "hamiltonian_from_bonds",
    "lattice_permutations", "basis_permutation", "read_config",
    "write_config", "export_triplets", "PAULI", "MAX_FULL_SITES",
]

# Full-space construction refused beyond this many sites (use corner mode).
MAX_FULL_SITES = 20

# 2x2 matrices in the (down, up) ordering.
PAULI = {
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, 1j], [-1j, 0]], dtype=complex),
    "z": np.array([[-1, 0], [0, 1]], dtype=complex),
    "plus": np.array([[0, 0], [1, 0]], dtype=complex),
    "minus": np.array([[0, 1], [0, 0]], dtype=complex),
}


@dataclass(frozen=True)
class LatticeSpec:
    """Physical problem definition.

    Energies are in units of the dissipation rate; ``gamma`` only rescales
    time.
    """

    lx: int = 2
    ly: int = 2
    jx: float = 0.9
    jy: float = 1.0
    jz: float = 1.0
    gamma: float = 1.0
    h: float = 0.0
    theta: float = 0.0
    periodic_x: bool = True
    periodic_y: bool = True

    def __post_init__(self):
        if int(self.lx) < 1 or int(self.ly) < 1:
            raise ValueError(f"lattice sides must be >= 1, got {self.lx}x{self.ly}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")

    @property
    def n_sites(self) -> int:
        return self.lx * self.ly

    @property
    def dim(self) -> int:
        return 2 ** self.n_sites

    def site_index(self, x: int, y: int) -> int:
        return (x % self.lx) + self.lx * (y % self.ly)

    def with_(self, **changes) -> "LatticeSpec":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class Edge:
    a: int
    b: int
    direction: str  # "x" or "y"


def enumerate_edges(spec: LatticeSpec) -> list[Edge]:
    """Nearest-neighbour bonds ``(i, i + x)`` and ``(i, i + y)``.

    Wrapped bonds exist only along periodic axes. Self-bonds (a side of
    length 1) are dropped. On a periodic side of length 2 every pair shows
    up twice, which doubles the effective coupling.
    """
    edges = []
    for y in range(spec.ly):
        for x in range(spec.lx):
            i = spec.site_index(x, y)
            for direction, (dx, dy), length, periodic in (
                ("x", (1, 0), spec.lx, spec.periodic_x),
                ("y", (0, 1), spec.ly, spec.periodic_y),
            ):
                coord = x if direction == "x" else y
                if coord + 1 >= length and not periodic:
                    continue
                j = spec.site_index(x + dx, y + dy)
                if j != i:
                    edges.append(Edge(i, j, direction))
    return edges


def _embed(op2: np.ndarray, site: int, n_sites: int) -> sp.csr_matrix:
    left = sp.identity(2 ** (n_sites - site - 1), format="csr", dtype=complex)
    right = sp.identity(2 ** site, format="csr", dtype=complex)
    return sp.kron(sp.kron(left, sp.csr_matrix(op2)), right, format="csr")


def site_operator(spec: LatticeSpec | int, site: int, which: str) -> sp.csr_matrix:
    """Pauli or ladder matrix acting on one site, identity elsewhere.

    ``spec`` may also be a plain site count.
    """
    n = spec if isinstance(spec, int) else spec.n_sites
    if not 0 <= site < n:
        raise IndexError(f"site {site} out of range for {n} sites")
    if which not in PAULI:
        raise ValueError(f"unknown operator {which!r}")
    return _embed(PAULI[which], site, n)


def _check_size(spec: LatticeSpec, max_sites: int | None):
    limit = MAX_FULL_SITES if max_sites is None else max_sites
    if spec.n_sites > limit:
        raise MemoryError(
            f"{spec.n_sites} sites exceeds the full-space limit of {limit}; "
            "use the corner-space solver")


def _bond_diagonal(bits_a, bits_b):
    # sigma^z_a sigma^z_b on basis states
    return np.where(bits_a == bits_b, 1.0, -1.0)


def field_operator(spec: LatticeSpec, theta: float | None = None, *,
                   max_sites: int | None = None) -> sp.csr_matrix:
    """``sum_j (cos theta sigma^x_j + sin theta sigma^y_j)`` at unit amplitude."""
    _check_size(spec, max_sites)
    theta = spec.theta if theta is None else theta
    return hamiltonian_from_bonds(spec.n_sites, [], 0.0, 0.0, 0.0, 1.0, theta)


def hamiltonian_from_bonds(n_sites: int, bonds, jx, jy, jz, h=0.0, theta=0.0,
                           field_sites=None) -> sp.csr_matrix:
    """XYZ couplings on ``bonds`` (pairs of local site indices) plus field.

    ``field_sites`` defaults to every site.
    """
    dim = 2 ** n_sites
    states = np.arange(dim)
    diag = np.zeros(dim)
    rows, cols, vals = [], [], []
    for a, b in bonds:
        ba = (states >> a) & 1
        bb = (states >> b) & 1
        diag += jz * _bond_diagonal(ba, bb)
        # XX + YY flips both spins: (Jx - Jy) when aligned, (Jx + Jy) otherwise
        amp = np.where(ba == bb, jx - jy, jx + jy)
        rows.append(states ^ ((1 << a) | (1 << b)))
        cols.append(states)
        vals.append(amp.astype(complex))
    if h != 0.0:
        for j in (range(n_sites) if field_sites is None else field_sites):
            bit = (states >> j) & 1
            # up -> down picks up e^{+i theta}, down -> up e^{-i theta}
            vals.append(h * np.where(bit == 1, np.exp(1j * theta), np.exp(-1j * theta)))
            rows.append(states ^ (1 << j))
            cols.append(states)
    rows.append(states)
    cols.append(states)
    vals.append(diag.astype(complex))
    H = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(dim, dim))
    H.sum_duplicates()
    H.eliminate_zeros()
    return H


def build_hamiltonian(spec: LatticeSpec, *, max_sites: int | None = None) -> sp.csr_matrix:
    """XYZ Hamiltonian plus the uniform in-plane field, as a sparse matrix."""
    _check_size(spec, max_sites)
    bonds = [(e.a, e.b) for e in enumerate_edges(spec)]
    return hamiltonian_from_bonds(spec.n_sites, bonds, spec.jx, spec.jy, spec.jz,
                                  spec.h, spec.theta)


def build_jump_operators(spec: LatticeSpec, *, max_sites: int | None = None) -> list[sp.csr_matrix]:
    """One ``sqrt(gamma) sigma^-_j`` per site."""
    _check_size(spec, max_sites)
    rate = np.sqrt(spec.gamma)
    return [rate * site_operator(spec, j, "minus") for j in range(spec.n_sites)]


def basis_permutation(site_perm, n_sites: int) -> np.ndarray:
    """Basis-state map induced by moving site ``j`` to ``site_perm[j]``."""
    states = np.arange(2 ** n_sites)
    out = np.zeros_like(states)
    for j, target in enumerate(site_perm):
        out |= ((states >> j) & 1) << int(target)
    return out


def _edge_multiset(spec, perm=None):
    keys = []
    for e in enumerate_edges(spec):
        a, b = (e.a, e.b) if perm is None else (perm[e.a], perm[e.b])
        keys.append((min(a, b), max(a, b)))
    return sorted(keys)


def lattice_permutations(spec: LatticeSpec) -> list[np.ndarray]:
    """Site permutations that leave the bond multiset invariant.

    Candidates are translations composed with the point operations of the
    square; only the ones that are genuine symmetries of the bond list are
    kept, so the result is a group for any boundary condition.
    """
    lx, ly = spec.lx, spec.ly
    coords = [(x, y) for y in range(ly) for x in range(lx)]
    point_ops = [
        lambda x, y: (x, y),
        lambda x, y: (-x, y),
        lambda x, y: (x, -y),
        lambda x, y: (-x, -y),
    ]
    if lx == ly:
        point_ops += [
            lambda x, y: (y, x),
            lambda x, y: (-y, x),
            lambda x, y: (y, -x),
            lambda x, y: (-y, -x),
        ]
    reference = _edge_multiset(spec)
    found = {}
    for op, tx, ty in itertools.product(point_ops, range(lx), range(ly)):
        perm = np.empty(len(coords), dtype=int)
        for x, y in coords:
            u, v = op(x, y)
            perm[spec.site_index(x, y)] = spec.site_index(u + tx, v + ty)
        if len(set(perm.tolist())) != len(coords):
            continue
        if _edge_multiset(spec, perm) == reference:
            found.setdefault(tuple(perm.tolist()), perm)
    return list(found.values())


_CONFIG_KEYS = {
    "lx": int, "ly": int, "jx": float, "jy": float, "jz": float,
    "gamma": float, "h": float, "theta": float,
    "periodic_x": bool, "periodic_y": bool,
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def read_config(path) -> LatticeSpec:
    """Read ``key = value`` lines (``#`` comments allowed) into a spec."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.lower()
        if key not in _CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        kind = _CONFIG_KEYS[key]
        values[key] = _parse_bool(value) if kind is bool else kind(value)
    return LatticeSpec(**values)


def write_config(spec: LatticeSpec, path):
    lines = [f"{k} = {getattr(spec, k)}" for k in _CONFIG_KEYS]
    Path(path).write_text("\n".join(lines) + "\n")


def export_triplets(op, path):
    """Write a matrix as ``row col re im`` lines, nonzeros only."""
    coo = sp.coo_matrix(op)
    with open(path, "w") as fh:
        fh.write(f"# dim {coo.shape[0]}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {float(v.real)!r} {float(v.imag)!r}\n")
