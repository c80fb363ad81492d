"""Graph generation with structured-precision Gaussian belief flows.

The generative process maintains a joint Gaussian belief over a continuous
graph encoding, governed by sparse Laplacian-based precision operators built
from the representation itself (never from sample adjacency).  Each Bayesian
update is a sparse SPD solve that couples node and edge variables; discrete
attributes are recovered by integrating truncated Gaussians over class
intervals.
"""

from .decode import (class_probabilities, decode_discrete, expected_center,
                     general_gaussian_kl, structured_kl, truncated_cdf)
from .estimator import VBFNGenerator
from .flow import (BeliefState, Schedule, alpha_increment, beta_at,
                   diagonal_fusion_reference, loss_weight, posterior_energy,
                   sample_flow_state)
from .graphs import (ClassGrid, Dataset, DatasetMeta, GraphSample,
                     build_class_grid, encode_continuous, make_sample,
                     read_dataset, unvectorize_edges, vectorize_edges,
                     write_samples)
from .pipeline import (evaluate_vun, gen_random_trees, gen_tree_dataset,
                       is_valid_tree, sample_graphs, wl_hash)
from .predictor import PredictorConfig, forward, init_params, loss_and_grad
from .solver import SolverConfig, sample_noise_with_covariance, solve_spd
from .structure import (DependencyGraph, MaskOperator, PrecisionOperator,
                        build_edge_dependency_line_complete,
                        build_joint_dependency,
                        build_node_dependency_complete, build_obs_precision,
                        build_prior_precision, condition_bound,
                        dirichlet_energy, laplacian, spectral_bounds)

__version__ = "0.1.0"

__all__ = [
    "VBFNGenerator", "Schedule", "BeliefState", "SolverConfig",
    "PrecisionOperator", "DependencyGraph", "MaskOperator", "ClassGrid",
    "GraphSample", "Dataset", "DatasetMeta", "PredictorConfig",
    "build_class_grid", "encode_continuous", "make_sample", "read_dataset",
    "write_samples", "vectorize_edges", "unvectorize_edges",
    "build_joint_dependency", "build_node_dependency_complete",
    "build_edge_dependency_line_complete", "laplacian", "dirichlet_energy",
    "build_prior_precision", "build_obs_precision", "spectral_bounds",
    "condition_bound", "solve_spd", "sample_noise_with_covariance",
    "beta_at", "alpha_increment", "loss_weight", "sample_flow_state",
    "diagonal_fusion_reference", "posterior_energy", "truncated_cdf",
    "class_probabilities", "expected_center", "decode_discrete",
    "structured_kl", "general_gaussian_kl", "forward", "init_params",
    "loss_and_grad", "gen_random_trees", "gen_tree_dataset", "is_valid_tree",
    "wl_hash", "evaluate_vun", "sample_graphs",
]
