"""Gaussian process state-space models with a recurrent recognition network."""

from .data import Dataset, Episode, cartpole_simulate, kink_generate, load_dataset, save_dataset
from .elbo import EmissionModel, elbo_estimate
from .kernels import RBF, ArcCosine0, Matern12, Sum, Warped, WarpNet, build_kernel
from .model import GPSSM, build_model
from .recognition import RecognitionNet
from .rollout import free_simulate, tip_error, transition_grid
from .sparse_gp import SparseGP
from .state_posterior import GaussMarkov, entropy, marginals, sample_trajectory

__version__ = "0.1.0"
