import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

import oracles
from dissxyz.lattice import (
    MAX_FULL_SITES, LatticeSpec, basis_permutation, build_hamiltonian,
    build_jump_operators, enumerate_edges, export_triplets, field_operator,
    lattice_permutations, read_config, site_operator, write_config,
)


def dense(op):
    return op.toarray() if sp.issparse(op) else np.asarray(op)


def test_basis_convention_single_site():
    # index 0 = down, index 1 = up
    sz = dense(site_operator(1, 0, "z"))
    assert np.allclose(sz, np.diag([-1, 1]))
    sm = dense(site_operator(1, 0, "minus"))
    down, up = np.eye(2)
    assert np.allclose(sm @ up, down)
    sy = dense(site_operator(1, 0, "y"))
    sx = dense(site_operator(1, 0, "x"))
    assert np.allclose(sx @ sy - sy @ sx, 2j * sz)


def test_site_zero_is_least_significant():
    sz0 = dense(site_operator(3, 0, "z")).diagonal().real
    assert np.array_equal(sz0, [-1, 1] * 4)
    sz2 = dense(site_operator(3, 2, "z")).diagonal().real
    assert np.array_equal(sz2, [-1] * 4 + [1] * 4)


def test_site_operator_range():
    with pytest.raises(IndexError):
        site_operator(2, 2, "x")
    with pytest.raises(ValueError):
        site_operator(2, 0, "w")


@pytest.mark.parametrize("lx,ly,expected", [(2, 2, 8), (3, 3, 18), (4, 2, 16), (1, 2, 2), (1, 1, 0)])
def test_edge_count(lx, ly, expected):
    assert len(enumerate_edges(LatticeSpec(lx, ly))) == expected


def test_open_edges():
    spec = LatticeSpec(3, 2, periodic_x=False, periodic_y=False)
    assert len(enumerate_edges(spec)) == 2 * 2 + 3 * 1


def test_l2_pairs_are_doubled():
    pairs = [tuple(sorted((e.a, e.b))) for e in enumerate_edges(LatticeSpec(2, 2))]
    assert sorted(pairs) == [(0, 1), (0, 1), (0, 2), (0, 2), (1, 3), (1, 3), (2, 3), (2, 3)]


@pytest.mark.parametrize("lx,ly", [(2, 2), (3, 2), (1, 3)])
def test_hamiltonian_matches_kronecker_oracle(lx, ly):
    spec = LatticeSpec(lx, ly, jx=0.7, jy=1.3, jz=-0.4, h=0.21, theta=0.8)
    H_ref, jumps_ref = oracles.operators(spec.n_sites, oracles.torus_bonds(lx, ly),
                                         0.7, 1.3, -0.4, h=0.21, theta=0.8)
    assert np.allclose(dense(build_hamiltonian(spec)), H_ref, atol=1e-13)
    for ours, ref in zip(build_jump_operators(spec), jumps_ref):
        assert np.allclose(dense(ours), ref)


def test_field_operator_direction():
    spec = LatticeSpec(2, 1)
    F = dense(field_operator(spec, theta=np.pi / 2))
    ref = sum(dense(site_operator(2, j, "y")) for j in range(2))
    assert np.allclose(F, ref)


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(0, 1),
       st.floats(0, 2 * np.pi))
def test_hamiltonian_hermitian(jx, jy, jz, h, theta):
    H = build_hamiltonian(LatticeSpec(2, 2, jx=jx, jy=jy, jz=jz, h=h, theta=theta))
    assert abs(H - H.conj().T).max() < 1e-12


def test_jump_rate():
    J = build_jump_operators(LatticeSpec(1, 2, gamma=4.0))
    assert np.isclose(abs(J[0]).max(), 2.0)


def test_size_guard():
    big = LatticeSpec(5, 5)
    assert big.n_sites > MAX_FULL_SITES
    with pytest.raises(MemoryError):
        build_hamiltonian(big)


def test_spec_validation():
    with pytest.raises(ValueError):
        LatticeSpec(0, 2)
    with pytest.raises(ValueError):
        LatticeSpec(gamma=0.0)


@pytest.mark.parametrize("lx,ly,order", [(2, 2, 8), (3, 3, 72), (4, 2, 16)])
def test_permutations_are_symmetries(lx, ly, order):
    spec = LatticeSpec(lx, ly, jy=1.1, h=0.03, theta=0.4)
    perms = lattice_permutations(spec)
    assert len(perms) == order
    H = build_hamiltonian(spec).toarray()
    for p in perms[:10]:
        b = basis_permutation(p, spec.n_sites)
        P = np.zeros_like(H)
        P[b, np.arange(len(b))] = 1
        assert np.allclose(P @ H @ P.T, H)


def test_config_roundtrip(tmp_path):
    spec = LatticeSpec(3, 2, jy=1.05, h=0.02, theta=0.5, periodic_y=False)
    path = tmp_path / "cfg"
    write_config(spec, path)
    assert read_config(path) == spec


def test_config_comments_and_errors(tmp_path):
    path = tmp_path / "cfg"
    path.write_text("# lattice\nlx = 3  # side\n\nly=3\njy = 1.1\n")
    spec = read_config(path)
    assert (spec.lx, spec.ly, spec.jy, spec.jx) == (3, 3, 1.1, 0.9)
    path.write_text("colour = red\n")
    with pytest.raises(ValueError):
        read_config(path)


def test_export_triplets(tmp_path):
    H = build_hamiltonian(LatticeSpec(1, 2, h=0.1))
    path = tmp_path / "h.txt"
    export_triplets(H, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "# dim 4"
    M = np.zeros((4, 4), dtype=complex)
    for line in lines[1:]:
        r, c, re, im = line.split()
        M[int(r), int(c)] = float(re) + 1j * float(im)
    assert np.array_equal(M, H.toarray())
