"""splatforge: single-exemplar sparse-voxel generative editing for 3D
Gaussian Splat scenes.

Pipeline: parse a splat scene, reduce per-Gaussian features, voxelize the
selected region into a two-level hierarchy, train a sparse transition-kernel
model on that single exemplar, then generate new shapes from coarse voxel
conditioning, refine them with patch-based consistency, and fill the result
with transplanted Gaussians.
"""

from .errors import (DimensionError, FormatError, ParameterError,
                     SamplerBudgetError, SplatForgeError, StateError,
                     TrainingError, UnsupportedTransformError, ValidationError)

__version__ = "0.1.0"

__all__ = [
    "DimensionError", "FormatError", "ParameterError", "SamplerBudgetError",
    "SplatForgeError", "StateError", "TrainingError",
    "UnsupportedTransformError", "ValidationError", "__version__",
]
