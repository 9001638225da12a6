"""
Picklable solver configurations: ``spec -> DensityMatrix`` callables for the
exact master equation, trajectory ensembles and the corner method.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .corner import CornerSettings, corner_steady_state
from .lattice import LatticeSpec, site_operator
from .master import DensityMatrix, solve_steady_state
from .trajectories import EnsembleSettings, ensemble_density_matrix

__all__ = ["SolverConfig", "make_solver", "SOLVER_KINDS"]

SOLVER_KINDS = ("master", "trajectory", "corner")


@dataclass
class SolverConfig:
    """Which steady-state solver to use and how.

    ``kind`` is one of ``master`` (exact full space, ``method`` selects the
    algorithm), ``trajectory`` (MCWF ensemble, full space) or ``corner``
    (column-strip merges at corner dimension ``corner_dim``).
    """

    kind: str = "master"
    method: str = "auto"
    ensemble: EnsembleSettings = field(default_factory=EnsembleSettings)
    corner_dim: int | None = None
    corner: CornerSettings = field(default_factory=CornerSettings)

    def __post_init__(self):
        if self.kind not in SOLVER_KINDS:
            raise ValueError(f"unknown solver kind {self.kind!r}; choose from {SOLVER_KINDS}")

    def __call__(self, spec: LatticeSpec) -> DensityMatrix:
        return make_solver(self)(spec)

    def provenance(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "master":
            out["method"] = self.method
        elif self.kind == "trajectory":
            out["ensemble"] = asdict(self.ensemble)
        else:
            out["corner_dim"] = self.corner_dim
            out["master_limit"] = self.corner.master_limit
        return out


def _trajectory_solve(spec, settings):
    n = spec.n_sites
    ops = [sum(site_operator(spec, j, w) for j in range(n)) / n for w in "xyz"]
    rho = ensemble_density_matrix(spec, settings, observables=ops)
    est = rho.info["estimates"]
    rho.info["magnetization_stderr"] = [e.stderr for e in est]
    rho.info["magnetization_mean"] = [e.mean for e in est]
    return rho


def make_solver(config: SolverConfig | str = "master"):
    """Return ``solve(spec) -> DensityMatrix`` for a configuration or kind name."""
    if isinstance(config, str):
        config = SolverConfig(kind=config)
    if config.kind == "master":
        return lambda spec: solve_steady_state(spec, config.method)
    if config.kind == "trajectory":
        return lambda spec: _trajectory_solve(spec, config.ensemble)

    def corner(spec):
        rho, _ = corner_steady_state(spec, config.corner_dim, config.corner)
        return rho
    return corner


def is_stochastic(rho: DensityMatrix) -> bool:
    return rho.info.get("method") == "trajectories" or np.any(
        [s.get("method") == "trajectories" for s in rho.info.get("corner", {}).get("steps", [])])
