"""Scene-text propagation through video with closed-form and fitted models.

Frontalize a text ROI in every frame, choose a reference frame, and carry a
replaced reference ROI to all frames with a lighting gain map and a fitted
differential blur.
"""

__version__ = "0.1.0"

from .blur import BlurFitter, BlurParams, apply_differential_transform, fit_blur_params, make_oriented_gaussian
from .exceptions import (AnnotationParseError, DegenerateGeometryError, FrameProcessingError,
                         InsufficientBackgroundError, InvalidArgumentError, LayoutError,
                         NoCandidateError, TextPropError, UndefinedCorrelationError)
from .geometry import estimate_homography, smooth_parameter_sequence, warp
from .metrics import blur_transfer_correlation, jitter, mse, psnr, ssim
from .photometry import LightingCorrector, RatioMap, apply_lighting, compute_ratio, estimate_background
from .pipeline import (FrameAnnotation, PipelineConfig, TextPropagator, TransformRecipe, build_recipes,
                       ingest, load_recipes, propagate, propagate_many, save_recipes)
from .refselect import ReferenceSelector, select_reference

__all__ = [
    "AnnotationParseError", "BlurFitter", "BlurParams", "DegenerateGeometryError", "FrameAnnotation",
    "FrameProcessingError", "InsufficientBackgroundError", "InvalidArgumentError", "LayoutError",
    "LightingCorrector", "NoCandidateError", "PipelineConfig", "RatioMap", "ReferenceSelector",
    "TextPropError", "TextPropagator", "TransformRecipe", "UndefinedCorrelationError",
    "apply_differential_transform", "apply_lighting", "blur_transfer_correlation", "build_recipes",
    "compute_ratio", "estimate_background", "estimate_homography", "fit_blur_params", "ingest",
    "jitter", "load_recipes", "make_oriented_gaussian", "mse", "propagate", "propagate_many", "psnr",
    "save_recipes", "select_reference", "smooth_parameter_sequence", "ssim", "warp",
]
