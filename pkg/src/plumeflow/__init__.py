"""plumeflow: a 2D Eulerian smoke simulator whose pressure solve can be
served by cheap surrogate solvers, plus the offline/online machinery that
builds, selects, and switches those surrogates against a user requirement on
final quality and run time."""

from .grid import GeometryField, GridDims, MacVelocityField, ScalarField
from .fluid import SimConfig, SimState, StepCost, Trajectory, simulate
from .pcg import PcgConfig, build_system, mic0_factor, pcg_solve
from .solvers import NetworkPressureSolver, PcgPressureSolver, truncated_pcg_solver
from .forge import SolverCandidate, ExecutionRecord, generate_family, iterative_family, pareto_select
from .mlp import UserRequirement, build_feature_vector, select_candidates, train_mlp
from .runtime import KnnDatabase, RuntimeConfig, knn_predict_qloss, run_adaptive

__version__ = "0.1.0"
