import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from dissxyz.lattice import LatticeSpec, build_hamiltonian, build_jump_operators
from dissxyz.master import (
    ConvergenceError, DegenerateSteadyStateError, DensityMatrix, FullSpace, Liouvillian,
    PositivityError, SolverSettings, evolve_to_steady, load_density_matrix, pure_state,
    save_density_matrix, solve_steady_state, spectral_decomposition, steady_state_krylov,
    steady_state_nullspace, trace_distance,
)

# M_z of the 2x2 torus (Jx = 0.9, Jz = 1, h = 0) from the brute-force
# superoperator SVD in oracles.py, frozen.
GOLDEN_MZ_2X2 = {0.9: -1.0, 1.0: -0.8387177927036392, 1.1: -0.511100172353577}


def oracle_state(spec):
    bonds = oracles.torus_bonds(spec.lx, spec.ly, spec.periodic_x, spec.periodic_y)
    H, J = oracles.operators(spec.n_sites, bonds, spec.jx, spec.jy, spec.jz, spec.gamma, spec.h, spec.theta)
    rho, _ = oracles.steady_state(H, J)
    return rho


@pytest.mark.parametrize("jy", sorted(GOLDEN_MZ_2X2))
def test_golden_mz(jy):
    rho = solve_steady_state(LatticeSpec(jy=jy))
    mz = oracles.magnetization(rho.data, 4)[2]
    assert abs(mz - GOLDEN_MZ_2X2[jy]) < 1e-10


@pytest.mark.parametrize("method", ["auto", "nullspace-plain", "krylov", "evolve"])
@pytest.mark.parametrize("spec", [
    LatticeSpec(jy=1.05, h=0.03, theta=0.7),
    LatticeSpec(1, 3, jx=0.4, jy=1.6, jz=-0.3, h=0.2, gamma=2.0),
    LatticeSpec(3, 1, periodic_x=False, h=0.1),
])
def test_methods_match_oracle(method, spec):
    rho = solve_steady_state(spec, method)
    tol = 1e-6 if method == "evolve" else 1e-9
    assert trace_distance(rho, oracle_state(spec)) < tol


def test_single_spin_bloch():
    for h in (0.05, 0.3, 1.0):
        for gamma in (1.0, 2.5):
            spec = LatticeSpec(1, 1, gamma=gamma, h=h)
            rho = solve_steady_state(spec)
            m = oracles.magnetization(rho.data, 1)
            assert np.allclose(m, oracles.bloch_steady_state(h, gamma), atol=1e-12)


def test_liouvillian_matches_superoperator():
    spec = LatticeSpec(1, 2, h=0.3, jy=1.2)
    H, J = build_hamiltonian(spec), build_jump_operators(spec)
    rng = np.random.default_rng(3)
    X = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    Hd, Jd = H.toarray(), [j.toarray() for j in J]
    ref = -1j * (Hd @ X - X @ Hd)
    for L in Jd:
        ref += L @ X @ L.conj().T - 0.5 * (L.conj().T @ L @ X + X @ L.conj().T @ L)
    assert np.allclose(Liouvillian(H, J)(X), ref)


def test_generator_is_trace_preserving():
    spec = LatticeSpec(2, 2, jy=1.3, h=0.1)
    gen = Liouvillian(build_hamiltonian(spec), build_jump_operators(spec))
    rng = np.random.default_rng(0)
    X = rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16))
    assert abs(np.trace(gen(X))) < 1e-12


def test_invariants_on_every_method():
    spec = LatticeSpec(jy=1.2, h=0.02, theta=1.0)
    for method in ("auto", "nullspace-plain", "krylov", "evolve"):
        rho = solve_steady_state(spec, method)
        assert np.abs(rho.data - rho.data.conj().T).max() < 1e-12
        assert abs(np.trace(rho.data) - 1) < 1e-10
        assert np.linalg.eigvalsh(rho.data).min() > -1e-10


def test_isotropic_point_is_pure_all_down():
    for L in (2, 3):
        rho = solve_steady_state(LatticeSpec(L, L, jx=0.9, jy=0.9))
        assert abs(rho.data[0, 0] - 1) < 1e-10


@pytest.mark.filterwarnings("ignore::scipy.linalg.LinAlgWarning")
def test_degenerate_steady_state_detected():
    # no dissipation on site 1: every diagonal state of it is stationary
    H = build_hamiltonian(LatticeSpec(1, 2, jx=0, jy=0, jz=1.0))
    J = build_jump_operators(LatticeSpec(1, 2))[:1]
    with pytest.raises(DegenerateSteadyStateError):
        steady_state_nullspace(H, J)


def test_nullspace_size_guard():
    spec = LatticeSpec(2, 2)
    with pytest.raises(MemoryError):
        steady_state_nullspace(build_hamiltonian(spec), build_jump_operators(spec),
                               max_unknowns=100)


def test_krylov_size_guard():
    spec = LatticeSpec(2, 2)
    with pytest.raises(MemoryError):
        steady_state_krylov(build_hamiltonian(spec), build_jump_operators(spec), max_dim=8)


def test_evolution_timeout_reports_residual():
    spec = LatticeSpec(2, 2, jy=1.1)
    rho0 = np.zeros((16, 16), dtype=complex)
    rho0[-1, -1] = 1
    with pytest.raises(ConvergenceError) as err:
        evolve_to_steady(build_hamiltonian(spec), build_jump_operators(spec), rho0,
                         SolverSettings(t_max=2.0))
    assert err.value.residual is not None and err.value.residual > 0


def test_evolution_converges_from_any_start():
    spec = LatticeSpec(1, 2, h=0.2)
    H, J = build_hamiltonian(spec), build_jump_operators(spec)
    ref = solve_steady_state(spec)
    rng = np.random.default_rng(5)
    psi = rng.normal(size=4) + 1j * rng.normal(size=4)
    rho = evolve_to_steady(H, J, pure_state(psi))
    assert trace_distance(rho, ref) < 1e-6
    assert rho.info["method"] == "rk4"


def test_check_rejects_bad_states():
    with pytest.raises(PositivityError):
        DensityMatrix(np.diag([1.5, -0.5])).check()
    with pytest.raises(ValueError):
        DensityMatrix(np.diag([0.5, 0.4])).check()
    with pytest.raises(ValueError):
        DensityMatrix(np.array([[0.5, 0.1], [0.3, 0.5]])).check()


def test_spectral_decomposition_sorted_and_complete():
    rho = solve_steady_state(LatticeSpec(jy=1.1))
    dec = spectral_decomposition(rho)
    assert np.all(np.diff(dec.probabilities) <= 0)
    rebuilt = (dec.vectors * dec.probabilities) @ dec.vectors.conj().T
    assert np.allclose(rebuilt, rho.data, atol=1e-12)
    assert np.all(dec.support > dec.p_floor)


def test_spectral_decomposition_rejects_negative():
    with pytest.raises(PositivityError):
        spectral_decomposition(DensityMatrix(np.diag([1.1, -0.1])))


def test_snapshot_roundtrip(tmp_path):
    rho = solve_steady_state(LatticeSpec(jy=1.05, h=0.01))
    path = tmp_path / "rho.dmat"
    save_density_matrix(rho, path, provenance={"note": "test"})
    back = load_density_matrix(path)
    assert np.array_equal(back.data, rho.data)
    assert back.info["note"] == "test"
    assert back.info["spec"]["jy"] == 1.05
    assert isinstance(back.space, FullSpace)


def test_snapshot_rejects_foreign_file(tmp_path):
    path = tmp_path / "x"
    path.write_bytes(b"not a matrix")
    with pytest.raises(ValueError):
        load_density_matrix(path)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.floats(0.0, 0.5), st.floats(0, 6.3))
def test_steady_state_properties(jx, jy, h, theta):
    spec = LatticeSpec(1, 2, jx=jx, jy=jy, h=h, theta=theta)
    H, J = build_hamiltonian(spec), build_jump_operators(spec)
    rho = solve_steady_state(spec)
    assert np.abs(Liouvillian(H, J)(rho.data)).max() < 1e-10
    assert abs(np.trace(rho.data) - 1) < 1e-12
    assert np.linalg.eigvalsh(rho.data).min() > -1e-10
