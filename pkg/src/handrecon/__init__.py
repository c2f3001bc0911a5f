"""Multi-view 3D hand pose reconstruction, evaluation metrics and synthetic oracles."""

from .errors import DataError, HandReconError, NumericalError
from .geometry import CameraParams, project, triangulate
from .lbfgs import SolverOptions, lbfgs_minimize
from .losses import BiomechLimits, FrameObservations, HandObservation2D, LossWeights, total_loss
from .skeleton import HAND21, HandPose3D, NominalBoneLengths, SkeletonDef, canonical_hand
from .solver import fit_ground_truth, solve_frame, solve_sequence

__version__ = "0.1.0"

__all__ = [
    "BiomechLimits",
    "CameraParams",
    "DataError",
    "FrameObservations",
    "HAND21",
    "HandObservation2D",
    "HandPose3D",
    "HandReconError",
    "LossWeights",
    "NominalBoneLengths",
    "NumericalError",
    "SkeletonDef",
    "SolverOptions",
    "canonical_hand",
    "fit_ground_truth",
    "lbfgs_minimize",
    "project",
    "solve_frame",
    "solve_sequence",
    "total_loss",
    "triangulate",
]
