"""Attack objective: embedding similarity under random rendering plus total variation."""

import math

import numpy as np
import torch

from .embedding import batch_cosine
from .errors import InputError, MissingIdentity
from .masks import MaskTexture
from .renderer import DTYPE, AugmentationConfig, draw_params, face_uv, render_many


def _pixels(mask, pixels=None):
    if pixels is not None:
        return pixels
    if isinstance(mask, MaskTexture):
        return torch.as_tensor(mask.pixels, dtype=DTYPE)
    return torch.as_tensor(np.asarray(mask), dtype=DTYPE) if not isinstance(mask, torch.Tensor) else mask


def _safe_sqrt(x):
    # exact zero value and zero gradient where x == 0
    positive = x > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, x, torch.ones_like(x))), torch.zeros_like(x))


def tv_raw(pixels):
    """Sum over pixels and channels of sqrt(down_diff^2 + right_diff^2).

    Differences past the last row / column are zero (edge replication).
    Accepts (h, w) or (h, w, c) tensors or arrays.
    """
    p = pixels if isinstance(pixels, torch.Tensor) else torch.as_tensor(np.asarray(pixels), dtype=DTYPE)
    if p.dim() == 2:
        p = p[..., None]
    down = torch.zeros_like(p)
    right = torch.zeros_like(p)
    down[:-1] = p[:-1] - p[1:]
    right[:, :-1] = p[:, :-1] - p[:, 1:]
    return _safe_sqrt(down**2 + right**2).sum()


def tv_normalizer(shape):
    h, w = shape[:2]
    c = shape[2] if len(shape) > 2 else 1
    return h * w * c * math.sqrt(2.0)


def loss_tv(mask, normalized=True, pixels=None):
    """Total variation of the texture; ``normalized`` divides by h*w*c*sqrt(2) into [0, 1]."""
    p = _pixels(mask, pixels)
    raw = tv_raw(p)
    return raw / tv_normalizer(tuple(p.shape)) if normalized else raw


def _pair(models, galleries):
    if not isinstance(models, (list, tuple)):
        models = [models]
    if isinstance(galleries, dict):
        galleries = [galleries[m.name] for m in models]
    elif not isinstance(galleries, (list, tuple)):
        galleries = [galleries]
    if len(models) != len(galleries) or not models:
        raise InputError("need exactly one gallery per model and at least one model")
    return list(models), list(galleries)


def similarity_matrix(mask, faces, models, galleries, rng=None, params=None, pixels=None,
                      augmentation=None, backend="ellipsoid"):
    """(models, faces) tensor of cosines between masked probes and enrolled embeddings.

    Every model sees the same rendered images (one augmentation draw per face).
    Pass ``params`` to freeze the draws; otherwise they come from ``rng``.
    """
    models, galleries = _pair(models, galleries)
    for g in galleries:
        for f in faces:
            if f.identity not in g:
                raise MissingIdentity(f"identity {f.identity!r} missing from gallery of {g.model_name!r}")
    if params is None:
        rng = np.random.default_rng() if rng is None else rng
        params = draw_params(faces, rng, augmentation or AugmentationConfig())
    uvs = [face_uv(f, backend) for f in faces]
    images = render_many(mask, faces, uvs, params, _pixels(mask, pixels))
    identities = [f.identity for f in faces]
    return torch.stack([batch_cosine(m(images), g.targets(identities)) for m, g in zip(models, galleries)])


def loss_sim_raw(mask, faces, model, gallery, rng=None, **kw):
    """Batch mean cosine for a single model, in [-1, 1]."""
    return similarity_matrix(mask, faces, [model], [gallery], rng, **kw)[0].mean()


def loss_sim_normalized(mask, faces, models, galleries, rng=None, **kw):
    """Mean over models and batch of (cos + 1) / 2, in [0, 1]."""
    cos = similarity_matrix(mask, faces, models, galleries, rng, **kw)
    return ((cos + 1.0) / 2.0).mean(dim=1).mean()


def loss_terms(mask, faces, models, galleries, lambda_tv, rng=None, pixels=None, **kw):
    """(total, similarity, tv) tensors; total = similarity + lambda_tv * normalized tv."""
    sim = loss_sim_normalized(mask, faces, models, galleries, rng, pixels=pixels, **kw)
    tv = loss_tv(mask, normalized=True, pixels=pixels)
    return sim + lambda_tv * tv, sim, tv


def total_loss(mask, faces, models, galleries, config, rng=None, **kw):
    kw.setdefault("augmentation", getattr(config, "augmentation", None))
    return loss_terms(mask, faces, models, galleries, config.lambda_tv, rng, **kw)[0]
