"""Face samples, image IO and on-disk dataset ingestion.

Datasets live on disk as ``root/<identity>/<image>.png``; every image is an
aligned 112x112 RGB crop.
"""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError, ShapeMismatch

FACE_SIZE = 112
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class FaceSample:
    """An aligned face crop with its landmarks and identity label.

    ``key`` names the sample (file path or synthetic id) and keys per-face
    random streams.  ``uv`` caches the face's UV correspondence once computed.
    """

    image: np.ndarray
    landmarks: np.ndarray
    identity: str
    key: str = ""
    attributes: dict = field(default_factory=dict)
    uv: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.landmarks = np.asarray(self.landmarks, dtype=np.float64)
        check_face_image(self.image)
        if self.landmarks.ndim != 2 or self.landmarks.shape[1] != 2:
            raise ShapeMismatch(f"landmarks must be (K, 2), got {self.landmarks.shape}")
        if (self.landmarks < 0).any() or (self.landmarks > FACE_SIZE - 1).any():
            raise InputError("landmarks outside image bounds", key=self.key)
        if not self.key:
            self.key = f"{self.identity}/{image_digest(self.image)[:12]}"


def check_face_image(image):
    shape = tuple(image.shape)
    if shape != (FACE_SIZE, FACE_SIZE, 3):
        raise ShapeMismatch(f"expected a {FACE_SIZE}x{FACE_SIZE}x3 image, got {shape}")


def image_digest(image):
    return hashlib.sha256(np.ascontiguousarray(image, dtype=np.float64).tobytes()).hexdigest()


def group_by_identity(faces):
    groups = {}
    for face in faces:
        groups.setdefault(face.identity, []).append(face)
    return groups


def dataset_fingerprint(faces):
    """Order-sensitive digest of identities and pixel content."""
    h = hashlib.sha256()
    for face in faces:
        h.update(face.identity.encode())
        h.update(image_digest(face.image).encode())
    return h.hexdigest()


def to_uint8(image):
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, image):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(image)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def load_image(path, grayscale=False):
    path = Path(path)
    if not path.exists():
        raise InputError(f"image not found: {path}", path=path)
    with Image.open(path) as im:
        im = im.convert("L" if grayscale else "RGB")
        return np.asarray(im, dtype=np.float64) / 255.0


def read_split(path):
    """Identity list file: one identity per line, ``#`` comments allowed."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"split file not found: {path}", path=path)
    names = []
    for line in path.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            names.append(line)
    return names


def iter_image_files(root):
    root = Path(root)
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(root, landmark_backend, identities=None):
    """Load ``root/<identity>/<images>``, detecting landmarks on every image.

    ``identities`` restricts (and orders) the identities read, mirroring the
    explicit train/test split files.
    """
    from .renderer import detect_landmarks

    root = Path(root)
    if not root.is_dir():
        raise InputError(f"dataset root not found: {root}", path=root)
    if identities is None:
        identities = sorted(p.name for p in root.iterdir() if p.is_dir())
    faces = []
    for identity in identities:
        folder = root / identity
        if not folder.is_dir():
            raise InputError(f"identity folder missing: {folder}", path=folder)
        for path in iter_image_files(folder):
            image = load_image(path)
            landmarks = detect_landmarks(image, landmark_backend)
            faces.append(FaceSample(image, landmarks, identity, key=str(path)))
    return faces


def save_dataset(root, faces):
    """Write faces as ``root/<identity>/<nnn>.png``; returns the written paths."""
    root = Path(root)
    counters = {}
    paths = []
    for face in faces:
        n = counters.get(face.identity, 0)
        counters[face.identity] = n + 1
        path = root / face.identity / f"{n:03d}.png"
        save_image(path, face.image)
        paths.append(path)
    return paths
