"""
Monte Carlo wavefunction unraveling of the master equation.

Each trajectory evolves an unnormalized state under ``H_eff`` with RK4 and
jumps when its squared norm falls below a uniformly drawn threshold (the
waiting-time method). Steady-state expectation values are time averages over
``[t_burn, t_burn + t_avg)`` on every trajectory, with error bars from the
spread across trajectories.

Every trajectory owns a counter-based Philox stream keyed by
``(seed, trajectory index)``, and trajectories are processed in fixed-size
chunks, so results do not depend on how chunks are scheduled.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .lattice import LatticeSpec, build_hamiltonian, build_jump_operators
from .master import DensityMatrix, FullSpace

__all__ = [
    "EnsembleSettings", "TrajectoryState", "ObservableEstimate",
    "StepSizeError", "effective_hamiltonian", "trajectory_stream",
    "new_trajectory", "step_trajectory", "run_ensemble", "run_ensemble_ops",
    "ensemble_density_matrix", "EnsembleResult",
]

logger = logging.getLogger(__name__)

NORM_UNDERFLOW = 1e-12


class StepSizeError(RuntimeError):
    """The norm collapsed within a single step; ``dt`` is too large."""


@dataclass
class EnsembleSettings:
    n_traj: int = 500
    dt: float = 0.01
    t_burn: float = 20.0
    t_avg: float = 200.0
    seed: int = 0
    sample_every: int = 10
    chunk_size: int = 128
    n_jobs: int = 1
    checkpoint: str | None = None

    def __post_init__(self):
        if self.n_traj < 1:
            raise ValueError("n_traj must be >= 1")
        if not (self.t_burn > 0 and self.t_avg > 0):
            raise ValueError("t_burn and t_avg must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")


@dataclass
class TrajectoryState:
    psi: np.ndarray
    t: float
    stream: np.random.Generator
    threshold: float
    n_jumps: int = 0
    jump_times: list = field(default_factory=list)

    @property
    def norm2(self) -> float:
        return float(np.vdot(self.psi, self.psi).real)


@dataclass
class ObservableEstimate:
    mean: float
    stderr: float
    n_traj: int
    window: tuple
    samples: np.ndarray = field(default=None, repr=False)


def trajectory_stream(seed: int, index: int) -> np.random.Generator:
    """Independent Philox stream for trajectory ``index``."""
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), index]))


def effective_hamiltonian(H, jumps):
    decay = sum(L.conj().T @ L for L in jumps)
    return H - 0.5j * decay


def new_trajectory(psi0, seed=0, index=0) -> TrajectoryState:
    stream = trajectory_stream(seed, index)
    psi = np.array(psi0, dtype=complex)
    psi /= np.linalg.norm(psi)
    return TrajectoryState(psi, 0.0, stream, stream.random())


class _Propagator:
    """RK4 for ``d psi/dt = -i H_eff psi`` acting on column blocks."""

    def __init__(self, H_eff, jumps, dt, dense_limit=1024):
        self.dt = dt
        self.dim = H_eff.shape[0]
        self.gen = (-1j * H_eff).tocsr() if sp.issparse(H_eff) else -1j * np.asarray(H_eff)
        self.jumps = [L.tocsr() if sp.issparse(L) else np.asarray(L) for L in jumps]
        self.full_step = None
        if self.dim <= dense_limit:
            X = self.gen.toarray() if sp.issparse(self.gen) else self.gen
            X = X * dt
            P = np.eye(self.dim, dtype=complex)
            term = np.eye(self.dim, dtype=complex)
            for k in range(1, 5):
                term = term @ X / k
                P = P + term
            self.full_step = P

    def step(self, psi, h=None):
        if h is None and self.full_step is not None:
            return self.full_step @ psi
        h = self.dt if h is None else h
        g = self.gen
        k1 = g @ psi
        k2 = g @ (psi + 0.5 * h * k1)
        k3 = g @ (psi + 0.5 * h * k2)
        k4 = g @ (psi + h * k3)
        return psi + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _jump(psi, jumps, u):
    """Apply the channel selected by uniform ``u`` and renormalize."""
    candidates = [L @ psi for L in jumps]
    weights = np.array([np.vdot(c, c).real for c in candidates])
    total = weights.sum()
    if total <= 0:
        raise StepSizeError("jump requested on a state with no decay channel")
    k = int(np.searchsorted(np.cumsum(weights) / total, u, side="right"))
    k = min(k, len(jumps) - 1)
    out = candidates[k]
    return out / np.sqrt(weights[k]), k


def _advance_block(Psi, n0, thresholds, streams, prop, t, jump_log=None):
    """One ``dt`` step for every column; jumps resolved at interpolated times.

    Returns the new block, its squared norms and the per-column jump flags.
    """
    new = prop.step(Psi)
    n1 = np.einsum("ib,ib->b", new.conj(), new).real
    jumped = np.flatnonzero(n1 < thresholds)
    for b in jumped:
        psi0 = Psi[:, b]
        a, c = n0[b], n1[b]
        if c < NORM_UNDERFLOW:
            raise StepSizeError(f"norm^2 {c:.1e} after one step at t={t:.3f}; reduce dt")
        if a <= thresholds[b]:
            tau = 0.0
        else:
            tau = prop.dt * np.log(a / thresholds[b]) / np.log(a / c)
            tau = min(max(tau, 0.0), prop.dt)
        psi_mid = prop.step(psi0[:, None], tau)[:, 0] if tau > 0 else psi0
        psi_jump, _ = _jump(psi_mid, prop.jumps, streams[b].random())
        thresholds[b] = streams[b].random()
        rest = prop.dt - tau
        psi_new = prop.step(psi_jump[:, None], rest)[:, 0] if rest > 0 else psi_jump
        new[:, b] = psi_new
        n1[b] = np.vdot(psi_new, psi_new).real
        if jump_log is not None:
            jump_log[b].append(t + tau)
    return new, n1, jumped


def step_trajectory(state: TrajectoryState, H_eff, jumps, dt) -> TrajectoryState:
    """Advance one trajectory by ``dt`` (non-Hermitian RK4 plus jumps)."""
    prop = _Propagator(H_eff, jumps, dt, dense_limit=0)
    Psi = state.psi[:, None].copy()
    thresholds = np.array([state.threshold])
    log = [[]]
    new, n1, jumped = _advance_block(Psi, np.array([state.norm2]), thresholds,
                                     [state.stream], prop, state.t, log)
    return TrajectoryState(new[:, 0], state.t + dt, state.stream, float(thresholds[0]),
                           state.n_jumps + len(jumped), state.jump_times + log[0])


@dataclass
class _ChunkResult:
    start: int
    means: np.ndarray         # (n_obs, n) time-averaged expectation values
    jumps: np.ndarray          # jumps inside the averaging window
    rho_sum: np.ndarray | None  # summed normalized projectors
    n_samples: int


def _run_chunk(args):
    (start, stop, H_eff, jumps, observables, psi0, settings, want_rho) = args
    prop = _Propagator(H_eff, jumps, settings.dt)
    n = stop - start
    streams = [trajectory_stream(settings.seed, i) for i in range(start, stop)]
    thresholds = np.array([s.random() for s in streams])
    Psi = np.repeat(np.asarray(psi0, dtype=complex)[:, None], n, axis=1)
    Psi /= np.linalg.norm(Psi[:, 0])
    norms = np.ones(n)
    n_burn = int(round(settings.t_burn / settings.dt))
    n_avg = int(round(settings.t_avg / settings.dt))
    obs = [o.tocsr() if sp.issparse(o) else np.asarray(o) for o in observables]
    sums = np.zeros((len(obs), n))
    jump_counts = np.zeros(n, dtype=np.int64)
    rho_sum = np.zeros((prop.dim, prop.dim), dtype=complex) if want_rho else None
    n_samples = 0
    for k in range(n_burn + n_avg):
        Psi, norms, jumped = _advance_block(Psi, norms, thresholds, streams, prop,
                                            k * settings.dt)
        if k >= n_burn:
            jump_counts[jumped] += 1
            if (k - n_burn) % settings.sample_every == 0:
                for i, o in enumerate(obs):
                    sums[i] += np.einsum("ib,ib->b", Psi.conj(), o @ Psi).real / norms
                if want_rho:
                    scaled = Psi / np.sqrt(norms)
                    rho_sum += scaled @ scaled.conj().T
                n_samples += 1
    return _ChunkResult(start, sums / n_samples, jump_counts, rho_sum, n_samples)


@dataclass
class EnsembleResult:
    estimates: list
    per_trajectory: np.ndarray
    jump_rate: ObservableEstimate
    rho: np.ndarray | None
    settings: EnsembleSettings


def _estimate(samples, settings) -> ObservableEstimate:
    n = len(samples)
    mean = float(samples.mean())
    stderr = float(samples.std(ddof=1) / np.sqrt(n)) if n >= 2 else float("nan")
    return ObservableEstimate(mean, stderr, n,
                              (settings.t_burn, settings.t_burn + settings.t_avg), samples)


def _checkpoint_key(settings, extra):
    payload = json.dumps({**asdict(replace(settings, n_jobs=1, checkpoint=None)),
                          "extra": extra}, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _load_checkpoint(path, key):
    path = Path(path)
    if not path.exists():
        return {}
    with np.load(path, allow_pickle=False) as data:
        if str(data["key"]) != key:
            return {}
        done = {}
        for start in data["starts"]:
            s = int(start)
            rho = data[f"rho_{s}"] if f"rho_{s}" in data else None
            done[s] = _ChunkResult(s, data[f"means_{s}"], data[f"jumps_{s}"], rho,
                                   int(data[f"nsamp_{s}"]))
    return done


def _save_checkpoint(path, key, done):
    arrays = {"key": np.array(key), "starts": np.array(sorted(done), dtype=np.int64)}
    for s, r in done.items():
        arrays[f"means_{s}"] = r.means
        arrays[f"jumps_{s}"] = r.jumps
        arrays[f"nsamp_{s}"] = np.array(r.n_samples)
        if r.rho_sum is not None:
            arrays[f"rho_{s}"] = r.rho_sum
    tmp = Path(str(path) + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def run_ensemble_ops(H, jumps, observables, settings: EnsembleSettings | None = None,
                     psi0=None, *, want_rho=False) -> EnsembleResult:
    """Trajectory ensemble for explicit operators (full or corner space)."""
    settings = settings or EnsembleSettings()
    H_eff = effective_hamiltonian(H, jumps)
    dim = H.shape[0]
    if psi0 is None:
        psi0 = np.zeros(dim, dtype=complex)
        psi0[0] = 1.0
    bounds = [(s, min(s + settings.chunk_size, settings.n_traj))
              for s in range(0, settings.n_traj, settings.chunk_size)]
    key = _checkpoint_key(settings, {"dim": dim, "want_rho": want_rho,
                                     "n_obs": len(observables),
                                     "h": float(np.abs(H_eff).sum())})
    done = _load_checkpoint(settings.checkpoint, key) if settings.checkpoint else {}
    todo = [(s, e, H_eff, jumps, observables, psi0, settings, want_rho)
            for s, e in bounds if s not in done]
    if settings.n_jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=settings.n_jobs) as pool:
            for res in pool.map(_run_chunk, todo):
                done[res.start] = res
                if settings.checkpoint:
                    _save_checkpoint(settings.checkpoint, key, done)
    else:
        for args in todo:
            res = _run_chunk(args)
            done[res.start] = res
            if settings.checkpoint:
                _save_checkpoint(settings.checkpoint, key, done)
    # reduction in trajectory-index order
    ordered = [done[s] for s, _ in bounds]
    per_traj = np.concatenate([r.means for r in ordered], axis=1)
    jumps_in_window = np.concatenate([r.jumps for r in ordered])
    estimates = [_estimate(row, settings) for row in per_traj]
    rate = _estimate(jumps_in_window / settings.t_avg, settings)
    rho = None
    if want_rho:
        rho = sum(r.rho_sum for r in ordered) / sum(r.n_samples * r.means.shape[1]
                                                     for r in ordered)
    return EnsembleResult(estimates, per_traj, rate, rho, settings)


def run_ensemble(spec: LatticeSpec, observables, settings: EnsembleSettings | None = None):
    """Steady-state estimates of ``observables`` for the full-space problem."""
    H = build_hamiltonian(spec)
    jumps = build_jump_operators(spec)
    return run_ensemble_ops(H, jumps, observables, settings).estimates


def ensemble_density_matrix(spec_or_ops, settings: EnsembleSettings | None = None, *,
                            observables=(), space=None, psi0=None,
                            max_dim=4096) -> DensityMatrix:
    """Time- and ensemble-averaged projector ``|psi><psi| / <psi|psi>``.

    ``spec_or_ops`` is a :class:`LatticeSpec` or an ``(H, jumps)`` pair.
    Estimates of ``observables`` are stored in ``info["estimates"]``.
    """
    if isinstance(spec_or_ops, LatticeSpec):
        H = build_hamiltonian(spec_or_ops)
        jumps = build_jump_operators(spec_or_ops)
        space = space or FullSpace(spec_or_ops.n_sites)
    else:
        H, jumps = spec_or_ops
    if H.shape[0] > max_dim:
        raise MemoryError(f"dim {H.shape[0]} too large to accumulate a dense density matrix")
    res = run_ensemble_ops(H, jumps, list(observables), settings, psi0, want_rho=True)
    rho = 0.5 * (res.rho + res.rho.conj().T)
    rho /= np.trace(rho).real
    return DensityMatrix(rho, space, info={
        "method": "trajectories", "estimates": res.estimates,
        "jump_rate": res.jump_rate, "settings": asdict(res.settings)})
