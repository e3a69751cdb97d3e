"""Factorized SDF re-rendering of outdoor scenes: relighting, photo adaptation and
field-of-view extrapolation."""
from .exceptions import (ConfigurationError, DegenerateNormalError, DomainError,
                         GeometryMutationError, RenderctlError, TrainingError, ValidationError)
from .field import BOUND_RADIUS, CodeDims, EncodingSpec, LatentCodes, SceneModel
from .renderer import CameraSpec, RenderOptions, render_image, render_pixel_factored

__version__ = "0.1.0"

__all__ = [
    "BOUND_RADIUS", "CameraSpec", "CodeDims", "ConfigurationError", "DegenerateNormalError",
    "DomainError", "EncodingSpec", "GeometryMutationError", "LatentCodes", "RenderOptions",
    "RenderctlError", "SceneModel", "TrainingError", "ValidationError", "render_image",
    "render_pixel_factored",
]
