"""Sparse temporal local attention for LiDAR point-cloud sequences."""

from .geometry import RigidPose, align_to_frame, to_cylindrical
from .neighborhood import knn_bruteforce, knn_neighborhood
from .sparse_grid import GridConfig, SparseVoxelSet, decompose, densify
from .stela_core import StelaParams, stela_backward, stela_forward

__all__ = [
    "GridConfig",
    "RigidPose",
    "SparseVoxelSet",
    "StelaParams",
    "align_to_frame",
    "decompose",
    "densify",
    "knn_bruteforce",
    "knn_neighborhood",
    "stela_backward",
    "stela_forward",
    "to_cylindrical",
]

__version__ = "0.1.0"
