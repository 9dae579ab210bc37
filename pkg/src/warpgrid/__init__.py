"""Dense semantic matching with bidirectional sampling grids.

Submodules:

- ``imagery``: image, mask, grid and keypoint containers plus their file formats
- ``warp``: differentiable bilinear warping
- ``losses``: cycle-consistent objectives, confidence targets and supervision terms
- ``synth``: procedural pairs with exact ground-truth grids
- ``solver``: per-pair direct optimization and the trainable predictor
- ``metrics``: PCK, Synthetic Dense, end-point error and calibration
- ``cli``: the ``warpgrid`` command
"""
from .imagery import ConfidenceMap, ImageBuffer, KeypointSet, Mask, SamplingGrid, identity_grid
from .losses import LossWeights, total_objective
from .metrics import calibration, end_point_error, pck, synthetic_dense
from .solver import DirectSolveConfig, direct_solve
from .synth import SynthConfig, WarpSpec, generate_dataset, make_pair
from .warp import bilinear_sample, compose_grids

__version__ = "0.1.0"

__all__ = [
    "ConfidenceMap",
    "ImageBuffer",
    "KeypointSet",
    "Mask",
    "SamplingGrid",
    "identity_grid",
    "LossWeights",
    "total_objective",
    "calibration",
    "end_point_error",
    "pck",
    "synthetic_dense",
    "DirectSolveConfig",
    "direct_solve",
    "SynthConfig",
    "WarpSpec",
    "generate_dataset",
    "make_pair",
    "bilinear_sample",
    "compose_grids",
]
