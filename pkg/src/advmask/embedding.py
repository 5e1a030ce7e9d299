"""Embedding models, cosine similarity and enrolled identity galleries."""

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import FACE_SIZE, group_by_identity
from .errors import (AssetMissing, EmptyIdentity, GalleryFormatError, InputError,
                     MissingIdentity, ShapeMismatch, ZeroVector)
from .masks import standard_masks
from .renderer import DTYPE, IDENTITY, face_uv, render_many
from .synthetic import synthetic_dataset

PLAIN = "plain"
MASK_AUGMENTED = "mask_augmented"
GALLERY_MODES = (PLAIN, MASK_AUGMENTED)


class ToyEmbedder(nn.Module):
    """Frozen random convolutional map 112x112x3 -> R^dim.

    Weights come from ``seed`` alone, so two instances with equal arguments
    are identical.  ``depth`` is the number of stride-2 conv blocks.  Pooled
    features are standardized with statistics from a fixed reference set of
    synthetic faces (see ``calibrate``); without that every face embeds into
    the same narrow cone.  The lower half of the pooled 4x4 grid is scaled by
    ``lower_weight`` after standardization, so the eye region dominates the
    identity signal the way it does for real recognizers.
    """

    def __init__(self, seed=0, dim=64, depth=3, width=8, lower_weight=0.5):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        layers, channels = [], 3
        for i in range(depth):
            out = width * (i + 1)
            conv = nn.Conv2d(channels, out, kernel_size=5 if i == 0 else 3, stride=2, padding=1)
            fan_in = conv.weight[0].numel()
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
            layers += [conv, nn.Tanh()]
            channels = out
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.head = nn.Linear(channels * 16, dim)
        with torch.no_grad():
            self.head.weight.copy_(torch.randn(self.head.weight.shape, generator=gen) / (channels * 16) ** 0.5)
            self.head.bias.zero_()
        self.register_buffer("feature_mean", torch.zeros(channels * 16))
        self.register_buffer("feature_scale", torch.ones(channels * 16))
        rows = torch.tensor([1.0, 1.0, lower_weight, lower_weight])
        self.register_buffer("row_weight", rows.view(1, 4, 1).expand(channels, 4, 4).reshape(-1).clone())
        self.to(DTYPE).eval().requires_grad_(False)

    def pooled(self, x):
        return self.pool(self.features((x - 0.5) / 0.5)).flatten(1)

    @torch.no_grad()
    def calibrate(self, images):
        """Set feature statistics from (N, 3, 112, 112) reference images."""
        feats = self.pooled(images.to(DTYPE))
        self.feature_mean.copy_(feats.mean(0))
        self.feature_scale.copy_(feats.std(0) + 1e-3)

    def forward(self, x):
        return self.head((self.pooled(x) - self.feature_mean) / self.feature_scale * self.row_weight)


REFERENCE_SEED = 987654


@lru_cache(maxsize=1)
def reference_images():
    """80 synthetic faces (40 identities) used only to calibrate toy embedders."""
    faces = synthetic_dataset(40, 2, seed=REFERENCE_SEED, prefix="ref")
    return torch.as_tensor(np.stack([f.image for f in faces]), dtype=DTYPE).permute(0, 3, 1, 2)


@dataclass(eq=False)
class EmbeddingModel:
    """Named embedding function over (N, 112, 112, 3) images in [0, 1]."""

    name: str
    dim: int
    module: nn.Module
    depth: int = 0
    loss_family: str = "toy"
    dtype: torch.dtype = DTYPE
    metadata: dict = field(default_factory=dict)

    def __call__(self, images):
        images = images if isinstance(images, torch.Tensor) else torch.as_tensor(np.asarray(images))
        single = images.dim() == 3
        if single:
            images = images[None]
        if tuple(images.shape[1:]) != (FACE_SIZE, FACE_SIZE, 3):
            raise ShapeMismatch(f"model {self.name!r} expects (N, {FACE_SIZE}, {FACE_SIZE}, 3), got {tuple(images.shape)}")
        x = images.permute(0, 3, 1, 2).to(self.dtype)
        out = self.module(x).to(DTYPE)
        return out[0] if single else out

    def describe(self):
        return {"name": self.name, "dim": self.dim, "depth": self.depth, "loss_family": self.loss_family}


def toy_model(name="toy", seed=0, dim=64, depth=3, loss_family="toy"):
    module = ToyEmbedder(seed, dim, depth)
    module.calibrate(reference_images())
    return EmbeddingModel(name, dim, module, depth=depth, loss_family=loss_family,
                          metadata={"kind": "toy", "seed": seed})


def torchscript_model(name, path, depth=0, loss_family="", dtype=torch.float32):
    """Adapter for an exported backbone taking (N, 3, 112, 112) input in [-1, 1]."""
    path = Path(path)
    if not path.exists():
        raise AssetMissing(f"model weights not found: {path}", path=path)
    scripted = torch.jit.load(str(path), map_location="cpu").eval()

    class _Normalized(nn.Module):
        def __init__(self, inner):
            super().__init__()
            self.inner = inner

        def forward(self, x):
            return self.inner((x - 0.5) / 0.5)

    module = _Normalized(scripted).requires_grad_(False)
    with torch.no_grad():
        dim = int(module(torch.zeros(1, 3, FACE_SIZE, FACE_SIZE, dtype=dtype)).shape[-1])
    return EmbeddingModel(name, dim, module, depth=depth, loss_family=loss_family, dtype=dtype,
                          metadata={"kind": "asset", "path": str(path)})


def embed(model, image):
    """Embedding of one image (tensor or array, 112x112x3) as a 1-D tensor."""
    image = image if isinstance(image, torch.Tensor) else torch.as_tensor(np.asarray(image), dtype=DTYPE)
    if image.dim() != 3:
        raise ShapeMismatch(f"embed expects a single 112x112x3 image, got {tuple(image.shape)}")
    return model(image)


def embed_faces(model, faces, batch_size=64):
    """Unit-normalized embeddings of FaceSamples as a numpy (N, dim) array."""
    out = []
    with torch.no_grad():
        for i in range(0, len(faces), batch_size):
            chunk = np.stack([f.image for f in faces[i:i + batch_size]])
            out.append(normalize(model(chunk)).numpy())
    return np.concatenate(out) if out else np.zeros((0, model.dim))


def normalize(v, axis=-1):
    if isinstance(v, torch.Tensor):
        return v / torch.linalg.vector_norm(v, dim=axis, keepdim=True)
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def cosine_similarity(a, b):
    """Cosine of two equal-length vectors; works on tensors (differentiable) or arrays."""
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        a, b = torch.as_tensor(a, dtype=DTYPE), torch.as_tensor(b, dtype=DTYPE)
        if a.shape != b.shape:
            raise ShapeMismatch(f"length mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
        if na == 0 or nb == 0:
            raise ZeroVector("cosine similarity of a zero vector")
        return torch.clamp(torch.dot(a, b) / (na * nb), -1.0, 1.0)
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def batch_cosine(embeddings, targets):
    """Row-wise cosine between (B, N) embeddings and (B, N) unit targets."""
    return torch.sum(normalize(embeddings) * targets, dim=-1)


# ------------------------------------------------------------------ gallery

@dataclass
class IdentityGallery:
    """Unit-norm enrolled embedding per identity for one model."""

    entries: dict
    model_name: str
    mode: str = PLAIN

    def __post_init__(self):
        if self.mode not in GALLERY_MODES:
            raise InputError(f"gallery mode must be one of {GALLERY_MODES}, got {self.mode!r}")
        entries = {}
        for k, v in self.entries.items():
            v = np.asarray(v, dtype=np.float64)
            if not np.isfinite(v).all() or np.linalg.norm(v) == 0:
                raise ZeroVector(f"entry for {k!r} is zero or non-finite")
            entries[k] = normalize(v)
        self.entries = entries

    @property
    def identities(self):
        return list(self.entries)

    @property
    def dim(self):
        return len(next(iter(self.entries.values()))) if self.entries else 0

    def __contains__(self, identity):
        return identity in self.entries

    def __getitem__(self, identity):
        try:
            return self.entries[identity]
        except KeyError:
            raise MissingIdentity(f"identity {identity!r} not enrolled in gallery for {self.model_name!r}") from None

    def matrix(self):
        """(identities, (count, dim) array) in insertion order."""
        ids = self.identities
        return ids, np.stack([self.entries[i] for i in ids]) if ids else np.zeros((0, 0))

    def targets(self, identities):
        return torch.as_tensor(np.stack([self[i] for i in identities]), dtype=DTYPE)

    def save(self, path):
        write_gallery(path, self)

    @classmethod
    def load(cls, path):
        return read_gallery(path)


def average_embeddings(vectors):
    """Unit-normalize each vector, average, renormalize."""
    mean = normalize(np.asarray(vectors, dtype=np.float64)).mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        raise ZeroVector("enrolled embeddings cancel out")
    return mean / norm


def build_gallery(model, images_by_identity, mode=PLAIN, masks=None, rng=None, backend="ellipsoid"):
    """Enroll every identity.

    ``images_by_identity`` maps identity -> FaceSamples (a flat list is
    grouped).  In ``mask_augmented`` mode each original also contributes one
    copy wearing a standard mask drawn uniformly from ``masks`` (default:
    blue, black, white), rendered without augmentation.
    """
    if mode not in GALLERY_MODES:
        raise InputError(f"gallery mode must be one of {GALLERY_MODES}, got {mode!r}")
    if not isinstance(images_by_identity, dict):
        images_by_identity = group_by_identity(images_by_identity)
    if mode == MASK_AUGMENTED:
        masks = standard_masks() if masks is None else masks
        names = sorted(masks)
        rng = np.random.default_rng(0) if rng is None else rng
    entries = {}
    for identity, faces in images_by_identity.items():
        if not faces:
            raise EmptyIdentity(f"identity {identity!r} has no images")
        vectors = list(embed_faces(model, faces))
        if mode == MASK_AUGMENTED:
            picks = [names[int(rng.integers(len(names)))] for _ in faces]
            with torch.no_grad():
                masked = [render_many(masks[name], [f], [face_uv(f, backend)], [IDENTITY])[0]
                          for f, name in zip(faces, picks)]
                vectors.extend(normalize(model(torch.stack(masked))).numpy())
        entries[identity] = average_embeddings(vectors)
    return IdentityGallery(entries, model.name, mode)


# ------------------------------------------------------------ gallery file
# header: magic, u16 version, u16 name length, name, u32 dim, u8 mode, u32 count
# entry:  u32 key length, key (utf-8), dim little-endian float32

MAGIC = b"AMGL"
VERSION = 1


def write_gallery(path, gallery):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    name = gallery.model_name.encode("utf-8")
    parts = [MAGIC, struct.pack("<HH", VERSION, len(name)), name,
             struct.pack("<IBI", gallery.dim, GALLERY_MODES.index(gallery.mode), len(gallery.entries))]
    for key, vec in gallery.entries.items():
        k = key.encode("utf-8")
        parts += [struct.pack("<I", len(k)), k, np.asarray(vec, dtype="<f4").tobytes()]
    path.write_bytes(b"".join(parts))


def read_gallery(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"gallery not found: {path}", path=path)
    buf = path.read_bytes()
    try:
        if buf[:4] != MAGIC:
            raise GalleryFormatError(f"{path} is not a gallery file")
        version, name_len = struct.unpack_from("<HH", buf, 4)
        if version != VERSION:
            raise GalleryFormatError(f"unsupported gallery version {version}")
        pos = 8
        model_name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        dim, mode, count = struct.unpack_from("<IBI", buf, pos)
        pos += 9
        entries = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            key = buf[pos:pos + klen].decode("utf-8")
            pos += klen
            entries[key] = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos).astype(np.float64)
            pos += 4 * dim
    except (struct.error, ValueError, IndexError) as exc:
        raise GalleryFormatError(f"corrupt gallery file {path}: {exc}") from exc
    return IdentityGallery(entries, model_name, GALLERY_MODES[mode])
