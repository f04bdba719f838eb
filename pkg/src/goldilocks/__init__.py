"""Loss-landscape curvature on random hyperplanes and spheres of neural-network parameter space."""

__version__ = "0.1.0"

from .autodiff import (Batch, LossAndGradient, NetworkArchitecture, NetworkLoss, QuadraticField,
                       RadialPowerField, forward, hessian_vector_product, loss_and_gradient)
from .curvature import (CurvatureStats, DirectionMoments, EigenSpectrum, RestrictedHessian,
                        curvature_stats, eigen_decompose, random_direction_moments,
                        restricted_hessian, stokes_check, wick_scaling_probe)
from .datasets import Dataset, load_mnist_idx, load_mnist_subset, synthetic_blobs
from .geometry import (InitScheme, NnzLaw, ProjectionMatrix, SubspaceChart, build_projection,
                       he_init, make_chart, rescale_to_multiple, xavier_init)
from .training import AdamState, TrainTrajectory, adam_step, train_fullspace, train_subspace

__all__ = [
    "AdamState", "Batch", "CurvatureStats", "Dataset", "DirectionMoments", "EigenSpectrum",
    "InitScheme", "LossAndGradient", "NetworkArchitecture", "NetworkLoss", "NnzLaw",
    "ProjectionMatrix", "QuadraticField", "RadialPowerField", "RestrictedHessian",
    "SubspaceChart", "TrainTrajectory", "adam_step", "build_projection", "curvature_stats",
    "eigen_decompose", "forward", "he_init", "hessian_vector_product", "load_mnist_idx",
    "load_mnist_subset", "loss_and_gradient", "make_chart", "random_direction_moments",
    "rescale_to_multiple", "restricted_hessian", "stokes_check", "synthetic_blobs",
    "train_fullspace", "train_subspace", "wick_scaling_probe", "xavier_init",
]
