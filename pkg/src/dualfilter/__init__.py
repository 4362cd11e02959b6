"""Dual (optimal control) filters for linear Gaussian models and HMMs.

Submodules:

``lgssm``       order-tau linear Gaussian model, dual filter, Kalman and MSE oracles
``hmm``         HMM core: two-cycle generator, forward filter, losses, Baum-Welch
``dual_hmm``    e-encoding, control law and the path-local layer iteration
``tree``        exact BSDE, duality and weight extraction on observation trees
``experiments`` runners used by the ``dualfilter`` command
"""
__version__ = "0.1.0"

from .dual_hmm import (cost_params, decompose, dual_filter_path, e_encode, heatmap, layer_path, phi,
                       query_weights_path)
from .hmm import Hmm, baum_welch, cross_entropy, entropy_benchmark, forward_filter, perturb, simulate_hmm, two_cycle
from .lgssm import (LinearGaussianModel, dual_cost, dual_filter_solve, kalman_augmented, mse_exact,
                    predict_linear, simulate)
from .tree import (bsde_solve_tree, cost_J, duality_check, estimator_tree, extract_weights, layer_tree,
                   observation_tree)

__all__ = [
    "Hmm", "LinearGaussianModel", "baum_welch", "bsde_solve_tree", "cost_J", "cost_params", "cross_entropy",
    "decompose", "dual_cost", "dual_filter_path", "dual_filter_solve", "duality_check", "e_encode",
    "entropy_benchmark", "estimator_tree", "extract_weights", "forward_filter", "heatmap", "kalman_augmented",
    "layer_path", "layer_tree", "mse_exact", "observation_tree", "perturb", "phi", "predict_linear",
    "query_weights_path", "simulate", "simulate_hmm", "two_cycle",
]
