"""Universal adversarial face-mask textures: rendering, optimization, evaluation and defenses."""

__version__ = "0.1.0"

from .errors import AdvMaskError, InputError
from .masks import MaskTexture, standard_mask, white_mask
from .renderer import AugmentationConfig, render, render_batch, reconstruct_uv
from .embedding import IdentityGallery, build_gallery, cosine_similarity, toy_model
from .optimizer import OptimizerConfig, optimize_targeted, optimize_universal

__all__ = [
    "AdvMaskError", "InputError", "MaskTexture", "standard_mask", "white_mask", "AugmentationConfig", "render",
    "render_batch", "reconstruct_uv", "IdentityGallery", "build_gallery", "cosine_similarity", "toy_model",
    "OptimizerConfig", "optimize_targeted", "optimize_universal",
]
