"""Incremental Gaussian-splat mapping from posed images and coloured point clouds."""

from .core import CameraModel, Gaussian2D, Gaussian3D, Pose
from .errors import (BudgetExhausted, ConfigurationError, ConsistencyError, SequenceError,
                     SplatError)
from .gaussian_map import GaussianMap
from .raster import RenderGradients, RenderOutput, render, render_backward

__version__ = "0.1.0"
