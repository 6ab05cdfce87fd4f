"""Cryo-EM density reconstruction by stochastic averaged gradient descent.

Poses are marginalized with weighted quadrature over view directions,
in-plane angles and shifts, and the quadrature sums are estimated by
per-image importance sampling.
"""

from .evaluation import align_volumes, expected_mse, rremse
from .imaging import Projector, adjoint_slice, extract_slice, forward_model
from .importance import build_importance, ess, is_marginal, sample_budget
from .likelihood import estimate_noise_sigma, exact_marginal, marginal_gradient, per_point_loglik
from .priors import PriorSpec, neg_log_prior, neg_log_prior_grad
from .quadrature import build_scheme, upgrade_scheme
from .reconstruct import ReconConfig, Reconstructor, run_reconstruction
from .sagd import epsilon_schedule, partition_minibatches, sagd_step
from .simulate import SimConfig, phantom_geometric, phantom_spheres, simulate_dataset
from .volume import CtfParams, DensityVolume, FourierImage, FourierVolume, ParticleImage, Pose

__version__ = "0.1.0"

__all__ = [
    "CtfParams", "DensityVolume", "FourierImage", "FourierVolume", "ParticleImage", "Pose",
    "PriorSpec", "Projector", "ReconConfig", "Reconstructor", "SimConfig",
    "adjoint_slice", "align_volumes", "build_importance", "build_scheme", "epsilon_schedule",
    "ess", "estimate_noise_sigma", "exact_marginal", "expected_mse", "extract_slice",
    "forward_model", "is_marginal", "marginal_gradient", "neg_log_prior", "neg_log_prior_grad",
    "partition_minibatches", "per_point_loglik", "phantom_geometric", "phantom_spheres",
    "rremse", "run_reconstruction", "sagd_step", "sample_budget", "simulate_dataset",
    "upgrade_scheme",
]
