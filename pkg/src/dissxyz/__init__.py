"""Steady states and criticality of the dissipative spin-1/2 XYZ lattice."""

from .lattice import (
    LatticeSpec, build_hamiltonian, build_jump_operators, enumerate_edges,
    read_config, site_operator, write_config,
)
from .master import (
    ConvergenceError, DegenerateSteadyStateError, DensityMatrix, PositivityError,
    SolverSettings, evolve_to_steady, load_density_matrix, save_density_matrix,
    solve_steady_state, spectral_decomposition, steady_state_krylov,
    steady_state_nullspace, trace_distance,
)
from .trajectories import EnsembleSettings, ensemble_density_matrix, run_ensemble
from .corner import (
    CornerSettings, MergePlan, converge_in_corner_dim, corner_steady_state, merge_corner,
)
from .observables import (
    angular_average, magnetization, negativity, quantum_fisher_information,
    susceptibility_tensor, von_neumann_entropy,
)
from .solvers import SolverConfig, make_solver
from .scaling import (
    ScanResult, critical_coupling, entropy_derivative, find_peak, observable_record,
    power_law_fit, run_scan,
)

__version__ = "0.1.0"
