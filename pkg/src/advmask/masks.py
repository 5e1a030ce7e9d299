"""Mask textures: the optimizable RGB pattern plus its fixed fabric support."""

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .data import load_image, save_image
from .errors import InputError, ShapeMismatch

MASK_HEIGHT = 60
MASK_WIDTH = 112

STANDARD_COLORS = {
    "blue": (0.30, 0.52, 0.71),
    "black": (0.05, 0.05, 0.05),
    "white": (0.95, 0.95, 0.95),
}


@dataclass
class MaskTexture:
    """RGB pixels in [0, 1] (H x W x 3) and a binary support (H x W)."""

    pixels: np.ndarray
    support: np.ndarray

    def __post_init__(self):
        self.pixels = np.clip(np.asarray(self.pixels, dtype=np.float64), 0.0, 1.0)
        self.support = (np.asarray(self.support) > 0.5).astype(np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeMismatch(f"mask pixels must be H x W x 3, got {self.pixels.shape}")
        if self.support.shape != self.pixels.shape[:2]:
            raise ShapeMismatch(f"support {self.support.shape} does not match pixels {self.pixels.shape[:2]}")

    @property
    def shape(self):
        return self.support.shape

    def with_pixels(self, pixels):
        """Same support, new pixels (clamped)."""
        if isinstance(pixels, torch.Tensor):
            pixels = pixels.detach().cpu().numpy()
        return MaskTexture(pixels, self.support)

    def save(self, path, support_path=None):
        """Write the texture PNG and, next to it, the grayscale support PNG."""
        path = Path(path)
        save_image(path, self.pixels)
        support_path = Path(support_path) if support_path else support_path_for(path)
        save_image(support_path, self.support)
        return path, support_path

    @classmethod
    def load(cls, path, support_path=None):
        path = Path(path)
        if not path.exists():
            raise InputError(f"mask texture not found: {path}", path=path)
        pixels = load_image(path)
        support_path = Path(support_path) if support_path else support_path_for(path)
        support = load_image(support_path, grayscale=True) if support_path.exists() else default_support(pixels.shape[:2])
        return cls(pixels, support)


def support_path_for(path):
    path = Path(path)
    return path.with_name(path.stem + ".support.png")


def mask_silhouette(height=MASK_HEIGHT, width=MASK_WIDTH):
    """Analytic face-mask outline: peaked over the nose, rounded under the chin."""
    t, s = np.mgrid[0:height, 0:width].astype(np.float64)
    t = (t + 0.5) / height
    s = 2.0 * (s + 0.5) / width - 1.0
    top = 0.30 * s**2
    bottom = 1.0 - 0.40 * s**4
    return ((t >= top) & (t <= bottom)).astype(np.float64)


def default_support(shape=(MASK_HEIGHT, MASK_WIDTH)):
    """Support shipped as ``assets/mask_support.png``; resized silhouettes for other shapes."""
    if tuple(shape) == (MASK_HEIGHT, MASK_WIDTH):
        with resources.as_file(resources.files("advmask") / "assets" / "mask_support.png") as p:
            return (load_image(p, grayscale=True) > 0.5).astype(np.float64)
    return mask_silhouette(*shape)


def uniform_mask(color, support=None):
    support = default_support() if support is None else support
    pixels = np.broadcast_to(np.asarray(color, dtype=np.float64), support.shape + (3,)).copy()
    return MaskTexture(pixels, support)


def white_mask(support=None):
    """Initial texture used before optimization."""
    return uniform_mask((1.0, 1.0, 1.0), support)


def standard_mask(name, support=None):
    if name not in STANDARD_COLORS:
        raise InputError(f"unknown standard mask {name!r}; choose from {sorted(STANDARD_COLORS)}")
    return uniform_mask(STANDARD_COLORS[name], support)


def standard_masks(support=None):
    return {name: standard_mask(name, support) for name in STANDARD_COLORS}


def random_mask(rng, support=None):
    """Independently uniform pixel colors."""
    support = default_support() if support is None else support
    return MaskTexture(rng.random(support.shape + (3,)), support)
