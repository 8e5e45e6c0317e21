"""Gradient codes for distributed learning with heterogeneous stragglers."""
from .codebook import (
    AlphaMatrix,
    GradientCode,
    RowTargets,
    estimate,
    extract_code,
    row_targets,
    verify_optimal_structure,
)
from .schemes import build_scheme, minibatch_dense_alpha, sparse_construct
from .straggler import StragglerProfile, sample_profile

__all__ = [
    "AlphaMatrix",
    "GradientCode",
    "RowTargets",
    "StragglerProfile",
    "build_scheme",
    "estimate",
    "extract_code",
    "minibatch_dense_alpha",
    "row_targets",
    "sample_profile",
    "sparse_construct",
    "verify_optimal_structure",
]

__version__ = "0.1.0"
