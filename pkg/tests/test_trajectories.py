import numpy as np
import pytest

import oracles
from dissxyz.lattice import LatticeSpec, build_hamiltonian, build_jump_operators, site_operator
from dissxyz.master import solve_steady_state
from dissxyz.trajectories import (
    EnsembleSettings, StepSizeError, _load_checkpoint, _save_checkpoint,
    effective_hamiltonian, ensemble_density_matrix, new_trajectory, run_ensemble,
    run_ensemble_ops, step_trajectory, trajectory_stream,
)

FAST = dict(n_traj=40, t_burn=10.0, t_avg=30.0, dt=0.02, chunk_size=16)


def mean_ops(spec):
    n = spec.n_sites
    return [sum(site_operator(spec, j, w) for j in range(n)) / n for w in "xyz"]


def test_streams_are_independent_and_reproducible():
    a = trajectory_stream(3, 0).random(5)
    assert np.array_equal(a, trajectory_stream(3, 0).random(5))
    assert not np.array_equal(a, trajectory_stream(3, 1).random(5))
    assert not np.array_equal(a, trajectory_stream(4, 0).random(5))


def test_no_jump_evolution_decays_norm():
    spec = LatticeSpec(1, 1)
    H, J = build_hamiltonian(spec), build_jump_operators(spec)
    up = np.array([0, 1], dtype=complex)
    state = new_trajectory(up, seed=0, index=0)
    state.threshold = 0.0   # forbid jumps
    H_eff = effective_hamiltonian(H, J)
    for _ in range(10):
        state = step_trajectory(state, H_eff, [], 0.05)
    # |up> decays as exp(-gamma t / 2) in amplitude
    assert np.isclose(state.norm2, np.exp(-0.5), rtol=1e-7)
    assert np.isclose(state.t, 0.5)


def test_jump_lands_in_target_state():
    spec = LatticeSpec(1, 1)
    H, J = build_hamiltonian(spec), build_jump_operators(spec)
    state = new_trajectory(np.array([0, 1], dtype=complex), seed=1, index=0)
    state.threshold = 0.9
    state = step_trajectory(state, effective_hamiltonian(H, J), J, 0.5)
    assert state.n_jumps == 1
    assert abs(state.psi[1]) < 1e-12
    assert 0 < state.jump_times[0] < 0.5


def test_jump_without_channel_is_refused():
    spec = LatticeSpec(1, 1)
    H, J = build_hamiltonian(spec), build_jump_operators(spec)
    state = new_trajectory(np.array([0, 1], dtype=complex))
    state.threshold = 0.99
    with pytest.raises(StepSizeError):
        step_trajectory(state, effective_hamiltonian(H, J), [0 * J[0]], 0.1)


def test_bloch_ensemble_within_error():
    h = 0.4
    spec = LatticeSpec(1, 1, h=h)
    est = run_ensemble(spec, mean_ops(spec), EnsembleSettings(n_traj=200, t_avg=100.0, seed=7))
    exact = oracles.bloch_steady_state(h)
    for e, ref in zip(est, exact):
        assert abs(e.mean - ref) < 4 * e.stderr + 1e-3


def test_bit_identical_reruns():
    spec = LatticeSpec(1, 2, jy=1.1, h=0.1)
    s = EnsembleSettings(seed=11, **FAST)
    a = run_ensemble(spec, mean_ops(spec), s)
    b = run_ensemble(spec, mean_ops(spec), s)
    assert [x.mean for x in a] == [x.mean for x in b]
    assert [x.stderr for x in a] == [x.stderr for x in b]


def test_seed_changes_result():
    spec = LatticeSpec(1, 2, jy=1.1, h=0.1)
    a = run_ensemble(spec, mean_ops(spec), EnsembleSettings(seed=1, **FAST))
    b = run_ensemble(spec, mean_ops(spec), EnsembleSettings(seed=2, **FAST))
    assert a[2].mean != b[2].mean


def test_worker_count_does_not_change_result():
    spec = LatticeSpec(1, 2, jy=1.1, h=0.1)
    ops = mean_ops(spec)
    a = run_ensemble(spec, ops, EnsembleSettings(seed=5, n_jobs=1, **FAST))
    b = run_ensemble(spec, ops, EnsembleSettings(seed=5, n_jobs=2, **FAST))
    assert [x.mean for x in a] == [x.mean for x in b]


def test_checkpoint_resume_is_identical(tmp_path):
    spec = LatticeSpec(1, 2, jy=1.1, h=0.1)
    H, J = build_hamiltonian(spec), build_jump_operators(spec)
    ops = mean_ops(spec)
    path = str(tmp_path / "ck.npz")
    settings = EnsembleSettings(seed=9, checkpoint=path, **FAST)
    full = run_ensemble_ops(H, J, ops, settings)
    # keep only the first chunk, as if interrupted
    key, done = _load_checkpoint_raw(path)
    _save_checkpoint(path, key, {0: done[0]})
    resumed = run_ensemble_ops(H, J, ops, settings)
    assert np.array_equal(full.per_trajectory, resumed.per_trajectory)


def _load_checkpoint_raw(path):
    with np.load(path, allow_pickle=False) as data:
        key = str(data["key"])
    return key, _load_checkpoint(path, key)


def test_ensemble_density_matrix_close_to_exact():
    spec = LatticeSpec(1, 2, jy=1.2, h=0.2)
    rho = ensemble_density_matrix(spec, EnsembleSettings(n_traj=100, t_avg=60.0, seed=3),
                                  observables=mean_ops(spec))
    exact = solve_steady_state(spec)
    rho.check()
    assert np.abs(rho.data - exact.data).max() < 0.05
    assert rho.info["jump_rate"].mean > 0


def test_settings_validation():
    with pytest.raises(ValueError):
        EnsembleSettings(n_traj=0)
    with pytest.raises(ValueError):
        EnsembleSettings(dt=0.0)
