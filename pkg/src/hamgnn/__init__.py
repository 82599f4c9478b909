"""Graph node embedding by Hamiltonian information propagation.

Node features and learnable per-node momenta evolve jointly under
Hamilton's equations driven by a learnable graph energy function.  The
package bundles the numeric core (sparse graphs, a small reverse-mode
autodiff tape, ODE solvers), the embedding model with classification and
link-prediction heads, a full-batch training loop, dataset tooling, and a
diagnostics CLI.
"""

from .graph import SparseGraph, build_graph, spmm, bfs_distances
from .autodiff import Tensor, Tape
from .energy import EnergyKind, EnergyParams, MomentumParams, PhaseState
from .integrators import SolverConfig, Trajectory, integrate
from .model import FlowKind, ModelParams, init_params, embed, classify, link_probability

__all__ = [
    "SparseGraph",
    "build_graph",
    "spmm",
    "bfs_distances",
    "Tensor",
    "Tape",
    "EnergyKind",
    "EnergyParams",
    "MomentumParams",
    "PhaseState",
    "SolverConfig",
    "Trajectory",
    "integrate",
    "FlowKind",
    "ModelParams",
    "init_params",
    "embed",
    "classify",
    "link_probability",
]

__version__ = "0.1.0"
