"""Differentiable projection of a mask texture onto an aligned face.

A face is mapped to a canonical UV space by a reconstruction backend.  The
mask texture is anchored in UV space by four landmarks (jaw corners, nose
bridge, chin), perturbed there by a random rotation and translation, and
pulled back onto the image with bilinear sampling.  Color augmentation then
touches only the mask contribution, which overwrites the face where the
projected support is at least one half.
"""

import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from scipy.interpolate import LinearNDInterpolator

from .assets import verified_path
from .data import FACE_SIZE, FaceSample, check_face_image
from .errors import (AdvMaskError, BackendUnavailable, InvalidConfig, NoFaceFound,
                     OutOfFrame, ReconstructionFailed, RenderFailure)
from .masks import MaskTexture
from .synthetic import LANDMARK_COORDS, LANDMARK_NAMES, silhouette_landmarks

DTYPE = torch.float64
UV_SIZE = 112
_ANCHOR = {name: LANDMARK_NAMES.index(name) for name in ("jaw_left", "jaw_right", "nose_bridge", "chin")}


# ---------------------------------------------------------------- landmarks

class SyntheticLandmarks:
    """Reads the canonical layout off a chroma-keyed synthetic face."""

    name = "synthetic"
    count = len(LANDMARK_NAMES)

    def __call__(self, image):
        return silhouette_landmarks(image)


# iBUG 68-point indices for each canonical landmark (averaged when several)
IBUG68_TO_CANONICAL = {
    "eye_left": range(36, 42),
    "eye_right": range(42, 48),
    "nose_bridge": [27],
    "nose_tip": [30],
    "cheek_left": [1],
    "cheek_right": [15],
    "mouth_left": [48],
    "mouth_right": [54],
    "jaw_left": [4],
    "jaw_right": [12],
    "chin": [8],
}


def ibug68_to_canonical(points):
    points = np.asarray(points, dtype=np.float64)
    return np.stack([points[list(IBUG68_TO_CANONICAL[n])].mean(axis=0) for n in LANDMARK_NAMES])


class TorchScriptLandmarks:
    """Pretrained 68-point detector exported with TorchScript.

    The model takes a (1, 3, 112, 112) tensor in [0, 1] and returns 68 (x, y)
    pixel coordinates; an empty output means no face.
    """

    count = len(LANDMARK_NAMES)

    def __init__(self, path="landmarks_ibug68.pt", checksum=None, name="ibug68"):
        self.name = name
        self.path = path
        self.checksum = checksum
        self._model = None

    def _load(self):
        if self._model is None:
            try:
                path = verified_path(self.path, self.checksum)
            except AdvMaskError as exc:
                raise BackendUnavailable(f"landmark backend {self.name!r} unavailable: {exc}") from exc
            self._model = torch.jit.load(str(path), map_location="cpu").eval()
        return self._model

    def __call__(self, image):
        model = self._load()
        x = torch.as_tensor(np.asarray(image), dtype=torch.float32).permute(2, 0, 1)[None]
        with torch.no_grad():
            out = model(x).reshape(-1, 2).double().numpy()
        if out.shape[0] == 0:
            raise NoFaceFound("landmark model found no face")
        return np.clip(ibug68_to_canonical(out), 0, FACE_SIZE - 1)


LANDMARK_BACKENDS = {"synthetic": SyntheticLandmarks(), "ibug68": TorchScriptLandmarks()}


def landmark_backend(backend):
    if isinstance(backend, str):
        try:
            return LANDMARK_BACKENDS[backend]
        except KeyError:
            raise InvalidConfig(f"unknown landmark backend {backend!r}") from None
    return backend


def detect_landmarks(image, backend="synthetic"):
    """Canonical landmark list for a 112x112x3 face image."""
    image = np.asarray(image, dtype=np.float64)
    check_face_image(image)
    backend = landmark_backend(backend)
    points = np.asarray(backend(image), dtype=np.float64)
    if points.shape != (backend.count, 2):
        raise NoFaceFound(f"backend {backend.name!r} returned {points.shape} points")
    if (points < 0).any() or (points > FACE_SIZE - 1).any():
        raise NoFaceFound("landmarks fall outside the image")
    return points


# ---------------------------------------------------------- correspondence

@dataclass(frozen=True)
class UVCorrespondence:
    """Dense image <-> UV mapping for one face.

    ``face_to_uv[y, x]`` holds the (u, v) texel coordinate seen at pixel
    (x, y); ``uv_to_face[v, u]`` holds the (x, y) pixel showing texel (u, v).
    Entries outside ``valid_mask`` / ``uv_valid`` are zero and meaningless.
    """

    face_to_uv: np.ndarray
    uv_to_face: np.ndarray
    valid_mask: np.ndarray
    uv_valid: np.ndarray
    landmarks_uv: np.ndarray

    def mask_box(self):
        """(u0, v0, u1, v1): the UV rectangle the mask texture is stretched over."""
        lm = self.landmarks_uv
        return (lm[_ANCHOR["jaw_left"], 0], lm[_ANCHOR["nose_bridge"], 1],
                lm[_ANCHOR["jaw_right"], 0], lm[_ANCHOR["chin"], 1])

    def sample_uv_to_face(self, uv):
        """Bilinear lookup of ``uv_to_face`` at float (u, v) points, shape (..., 2)."""
        uv = np.asarray(uv, dtype=np.float64)
        coords = [uv[..., 1].ravel(), uv[..., 0].ravel()]
        xs = ndimage.map_coordinates(self.uv_to_face[..., 0], coords, order=1, mode="nearest")
        ys = ndimage.map_coordinates(self.uv_to_face[..., 1], coords, order=1, mode="nearest")
        return np.stack([xs, ys], axis=-1).reshape(uv.shape)


class EllipsoidReconstruction:
    """Parametric head: an ellipsoid seen orthographically, fitted to landmarks.

    UV is longitude/latitude of the unit sphere, both spanning [-90, 90]
    degrees across the UV raster, so every map has a closed form.
    """

    name = "ellipsoid"

    def __init__(self, uv_size=UV_SIZE):
        self.uv_size = uv_size

    def fit(self, landmarks):
        """Least-squares (cx, cy, a, b) from the canonical landmark layout."""
        landmarks = np.asarray(landmarks, dtype=np.float64)
        params = []
        for axis in (0, 1):
            design = np.stack([np.ones(len(landmarks)), LANDMARK_COORDS[:, axis]], axis=1)
            (center, radius), *_ = np.linalg.lstsq(design, landmarks[:, axis], rcond=None)
            params.append((center, radius))
        (cx, a), (cy, b) = params
        if not np.isfinite([cx, cy, a, b]).all() or a < 4 or b < 4:
            raise ReconstructionFailed(f"degenerate head fit (a={a:.3g}, b={b:.3g})")
        return cx, cy, a, b

    def pixel_to_uv(self, x, y, head):
        cx, cy, a, b = head
        X = (np.asarray(x, dtype=np.float64) - cx) / a
        Y = (np.asarray(y, dtype=np.float64) - cy) / b
        r2 = X**2 + Y**2
        visible = r2 < 1.0
        Z = np.sqrt(np.clip(1.0 - r2, 0.0, None))
        lon = np.arctan2(X, Z)
        lat = np.arcsin(np.clip(Y, -1.0, 1.0))
        s = self.uv_size - 1
        return (lon / np.pi + 0.5) * s, (lat / np.pi + 0.5) * s, visible

    def uv_to_pixel(self, u, v, head):
        cx, cy, a, b = head
        s = self.uv_size - 1
        lon = (np.asarray(u, dtype=np.float64) / s - 0.5) * np.pi
        lat = (np.asarray(v, dtype=np.float64) / s - 0.5) * np.pi
        return cx + a * np.cos(lat) * np.sin(lon), cy + b * np.sin(lat)

    def __call__(self, image, landmarks):
        head = self.fit(landmarks)
        ys, xs = np.mgrid[0:FACE_SIZE, 0:FACE_SIZE].astype(np.float64)
        u, v, visible = self.pixel_to_uv(xs, ys, head)
        face_to_uv = np.where(visible[..., None], np.stack([u, v], axis=-1), 0.0)
        vv, uu = np.mgrid[0:self.uv_size, 0:self.uv_size].astype(np.float64)
        px, py = self.uv_to_pixel(uu, vv, head)
        uv_to_face = np.clip(np.stack([px, py], axis=-1), 0.0, FACE_SIZE - 1)
        lu, lv, _ = self.pixel_to_uv(np.asarray(landmarks)[:, 0], np.asarray(landmarks)[:, 1], head)
        return UVCorrespondence(face_to_uv, uv_to_face, visible, np.ones((self.uv_size,) * 2, bool),
                                np.stack([lu, lv], axis=-1))


def correspondence_from_position_map(position_map, landmarks):
    """UVCorrespondence from a UV position map (texel -> image x, y, depth).

    Depth grows toward the camera.  Texels whose surface normal faces away
    are dropped; the image -> UV direction is the piecewise-linear inverse
    over the remaining texels.
    """
    pos = np.asarray(position_map, dtype=np.float64)
    size_v, size_u = pos.shape[:2]
    dp_dv, dp_du = np.gradient(pos, axis=(0, 1))
    normal_z = dp_du[..., 0] * dp_dv[..., 1] - dp_du[..., 1] * dp_dv[..., 0]
    inside = ((pos[..., 0] >= 0) & (pos[..., 0] <= FACE_SIZE - 1)
              & (pos[..., 1] >= 0) & (pos[..., 1] <= FACE_SIZE - 1))
    front = (normal_z > 1e-9) & inside
    if front.sum() < 3:
        raise ReconstructionFailed("position map has no visible surface")
    vv, uu = np.mgrid[0:size_v, 0:size_u].astype(np.float64)
    interp = LinearNDInterpolator(pos[front][:, :2], np.stack([uu[front], vv[front]], axis=-1))
    ys, xs = np.mgrid[0:FACE_SIZE, 0:FACE_SIZE].astype(np.float64)
    f2uv = interp(xs, ys)
    valid = np.isfinite(f2uv).all(axis=-1)
    if not valid.any():
        raise ReconstructionFailed("position map covers no image pixel")
    lm_uv = interp(np.asarray(landmarks)[:, 0], np.asarray(landmarks)[:, 1])
    if not np.isfinite(lm_uv).all():
        raise ReconstructionFailed("landmarks fall outside the reconstructed surface")
    return UVCorrespondence(np.where(valid[..., None], f2uv, 0.0),
                            np.clip(pos[..., :2], 0.0, FACE_SIZE - 1), valid, front, lm_uv)


class PositionMapReconstruction:
    """Pretrained UV position-map regressor exported with TorchScript.

    The model maps a (1, 3, 112, 112) tensor in [0, 1] to a (S, S, 3)
    position map in image pixel units.
    """

    def __init__(self, path="uv_position_map.pt", checksum=None, name="position_map"):
        self.name = name
        self.path = path
        self.checksum = checksum
        self._model = None

    def __call__(self, image, landmarks):
        if self._model is None:
            try:
                path = verified_path(self.path, self.checksum)
            except AdvMaskError as exc:
                raise BackendUnavailable(f"reconstruction backend {self.name!r} unavailable: {exc}") from exc
            self._model = torch.jit.load(str(path), map_location="cpu").eval()
        x = torch.as_tensor(np.asarray(image), dtype=torch.float32).permute(2, 0, 1)[None]
        with torch.no_grad():
            pos = self._model(x).reshape(-1, *x.shape[-2:], 3)[0].double().numpy()
        return correspondence_from_position_map(pos, landmarks)


RECONSTRUCTION_BACKENDS = {"ellipsoid": EllipsoidReconstruction(), "position_map": PositionMapReconstruction()}


def reconstruction_backend(backend):
    if isinstance(backend, str):
        try:
            return RECONSTRUCTION_BACKENDS[backend]
        except KeyError:
            raise InvalidConfig(f"unknown reconstruction backend {backend!r}") from None
    return backend


def reconstruct_uv(image, landmarks, backend="ellipsoid"):
    uv = reconstruction_backend(backend)(image, landmarks)
    if not uv.valid_mask.any():
        raise ReconstructionFailed("reconstruction has no visible region")
    u0, v0, u1, v1 = uv.mask_box()
    if not (u1 - u0 > 1 and v1 - v0 > 1):
        raise ReconstructionFailed("mask anchors collapse in UV space")
    return uv


def face_uv(face, backend="ellipsoid"):
    """Correspondence for ``face``, computed once and cached on the sample."""
    if face.uv is None:
        face.uv = reconstruct_uv(face.image, face.landmarks, backend)
    return face.uv


# ------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentationConfig:
    """Closed (low, high) sampling ranges; collapse a range to disable it."""

    translation: tuple = (-4.0, 4.0)
    rotation: tuple = (-8.0, 8.0)
    contrast: tuple = (0.9, 1.1)
    brightness: tuple = (-0.05, 0.05)
    noise_sigma: tuple = (0.0, 0.02)

    def __post_init__(self):
        for name in ("translation", "rotation", "contrast", "brightness", "noise_sigma"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise InvalidConfig(f"augmentation range {name} is inverted: ({lo}, {hi})")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.noise_sigma[0] < 0:
            raise InvalidConfig("noise_sigma must be non-negative")

    @classmethod
    def identity(cls):
        return cls((0, 0), (0, 0), (1, 1), (0, 0), (0, 0))

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) for k, v in (d or {}).items()})

    def to_dict(self):
        return {k: list(getattr(self, k)) for k in ("translation", "rotation", "contrast", "brightness", "noise_sigma")}


@dataclass(frozen=True)
class AugmentationParams:
    translation: tuple = (0.0, 0.0)
    rotation: float = 0.0
    contrast: float = 1.0
    brightness: float = 0.0
    noise_seed: int = 0
    noise_sigma: float = 0.0

    def noise(self):
        if self.noise_sigma == 0:
            return np.zeros((FACE_SIZE, FACE_SIZE, 3))
        return self.noise_sigma * np.random.default_rng(self.noise_seed).standard_normal((FACE_SIZE, FACE_SIZE, 3))


IDENTITY = AugmentationParams()


def sample_augmentation(rng, config=None):
    config = AugmentationConfig() if config is None else config
    if not isinstance(config, AugmentationConfig):
        config = AugmentationConfig.from_dict(config)
    tx = rng.uniform(*config.translation)
    ty = rng.uniform(*config.translation)
    return AugmentationParams(
        translation=(float(tx), float(ty)),
        rotation=float(rng.uniform(*config.rotation)),
        contrast=float(rng.uniform(*config.contrast)),
        brightness=float(rng.uniform(*config.brightness)),
        noise_sigma=float(rng.uniform(*config.noise_sigma)),
        noise_seed=int(rng.integers(0, 2**31 - 1)),
    )


def face_stream(seed, key):
    """Independent generator for one face, stable under dataset reordering."""
    return np.random.default_rng([int(seed), zlib.crc32(str(key).encode())])


# ---------------------------------------------------------------- rendering

def sampling_grid(uv, params, mask_shape):
    """grid_sample coordinates into the texture for every image pixel.

    Geometric augmentation acts in UV space: the texture rectangle is rotated
    about its center and shifted, so a UV point is pulled back through the
    inverse motion before being mapped to texture coordinates.
    """
    h, w = mask_shape
    u0, v0, u1, v1 = uv.mask_box()
    cu, cv = (u0 + u1) / 2, (v0 + v1) / 2
    du = uv.face_to_uv[..., 0] - cu - params.translation[0]
    dv = uv.face_to_uv[..., 1] - cv - params.translation[1]
    theta = np.deg2rad(params.rotation)
    c, s = np.cos(theta), np.sin(theta)
    qu = c * du + s * dv + cu
    qv = -s * du + c * dv + cv
    gx = 2.0 * (qu - u0) / (u1 - u0) - 1.0
    gy = 2.0 * (qv - v0) / (v1 - v0) - 1.0
    grid = np.stack([gx, gy], axis=-1)
    return np.where(uv.valid_mask[..., None], grid, -4.0)


def _tensor(x):
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x), dtype=DTYPE)


def project(pixels, support, images, grids, params):
    """Batched compositing core.

    pixels (h, w, 3) tensor, possibly requiring grad; support (h, w);
    images (B, 112, 112, 3); grids (B, 112, 112, 2); params: B AugmentationParams.
    Returns (masked images (B, 112, 112, 3), coverage (B, 112, 112) bool).
    """
    pixels = _tensor(pixels)
    support = _tensor(support).to(pixels.dtype)
    images = _tensor(images).to(pixels.dtype)
    grids = _tensor(grids).to(pixels.dtype)
    batch = images.shape[0]
    src = torch.cat([pixels * support[..., None], support[..., None]], dim=-1)
    src = src.permute(2, 0, 1)[None].expand(batch, -1, -1, -1)
    sampled = F.grid_sample(src, grids, mode="bilinear", padding_mode="zeros", align_corners=True)
    sampled = sampled.permute(0, 2, 3, 1)
    weight = sampled[..., 3].detach()
    covered = weight >= 0.5
    color = sampled[..., :3] / torch.where(covered, weight, torch.ones_like(weight))[..., None]
    contrast = torch.tensor([p.contrast for p in params], dtype=pixels.dtype).view(-1, 1, 1, 1)
    brightness = torch.tensor([p.brightness for p in params], dtype=pixels.dtype).view(-1, 1, 1, 1)
    noise = torch.as_tensor(np.stack([p.noise() for p in params]), dtype=pixels.dtype)
    color = torch.clamp(contrast * color + brightness + noise, 0.0, 1.0)
    return torch.where(covered[..., None], color, images), covered


def _mask_tensors(mask, pixels):
    if not isinstance(mask, MaskTexture):
        raise RenderFailure(f"expected a MaskTexture, got {type(mask).__name__}")
    pixels = _tensor(mask.pixels) if pixels is None else pixels
    return pixels, _tensor(mask.support)


def render(mask, face, uv=None, params=IDENTITY, pixels=None):
    """Masked copy of ``face`` as a (112, 112, 3) tensor.

    ``pixels`` overrides ``mask.pixels`` with a (possibly grad-tracking) tensor.
    """
    out = render_many(mask, [face], [uv if uv is not None else face_uv(face)], [params], pixels)
    return out[0]


def render_many(mask, faces, uvs, params, pixels=None):
    """Render with explicit per-face correspondences and augmentation draws."""
    pixels, support = _mask_tensors(mask, pixels)
    grids = np.stack([sampling_grid(uv, p, mask.shape) for uv, p in zip(uvs, params)])
    images = np.stack([f.image for f in faces])
    out, covered = project(pixels, support, images, grids, params)
    if mask.support.any():
        empty = ~covered.reshape(len(faces), -1).any(dim=1)
        if empty.any():
            i = int(torch.nonzero(empty)[0])
            raise OutOfFrame(f"mask projects entirely outside face {i} ({faces[i].key})", index=i)
    return out


def draw_params(faces, rng, config):
    """One augmentation draw per face.

    ``rng`` is either a Generator (sequential draws in list order) or an
    integer seed, in which case each face gets its own stream keyed by
    ``face.key``.
    """
    if isinstance(rng, (int, np.integer)):
        return [sample_augmentation(face_stream(rng, f.key), config) for f in faces]
    return [sample_augmentation(rng, config) for _ in faces]


def render_batch(mask, faces, rng, config=None, backend="ellipsoid", pixels=None):
    """Render every face with a fresh augmentation draw; returns (B, 112, 112, 3)."""
    if not faces:
        raise RenderFailure("render_batch needs at least one face")
    uvs = []
    for i, face in enumerate(faces):
        try:
            uvs.append(face_uv(face, backend))
        except AdvMaskError as exc:
            raise type(exc)(f"face {i} ({face.key}): {exc}", index=i) from exc
    return render_many(mask, faces, uvs, draw_params(faces, rng, config), pixels)


def unwrap_texture(face, uv=None, shape=None, support=None):
    """Read the face pixels a mask would cover back into a texture.

    Used to build face-shaped control masks from a lower face.
    """
    from .masks import MASK_HEIGHT, MASK_WIDTH, default_support

    uv = face_uv(face) if uv is None else uv
    h, w = shape or (MASK_HEIGHT, MASK_WIDTH)
    u0, v0, u1, v1 = uv.mask_box()
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    q = np.stack([u0 + cols / (w - 1) * (u1 - u0), v0 + rows / (h - 1) * (v1 - v0)], axis=-1)
    xy = uv.sample_uv_to_face(q)
    pixels = np.stack([ndimage.map_coordinates(face.image[..., c], [xy[..., 1], xy[..., 0]], order=1, mode="nearest")
                       for c in range(3)], axis=-1)
    return MaskTexture(pixels, default_support((h, w)) if support is None else support)


def to_numpy(image):
    return image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)


def masked_sample(mask, face, params=IDENTITY, backend="ellipsoid", tag="masked"):
    """FaceSample carrying the rendered image (landmarks and identity kept)."""
    with torch.no_grad():
        image = to_numpy(render(mask, face, face_uv(face, backend), params))
    return FaceSample(image, face.landmarks, face.identity, key=f"{face.key}#{tag}", attributes=dict(face.attributes))
