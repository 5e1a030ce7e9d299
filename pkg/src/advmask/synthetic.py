"""Procedural faces for desk-scale experiments.

Faces are shaded ellipses on a chroma-key background.  Identity is carried by
skin tone, face proportions, eyes, brows, hair and mouth; each image adds
placement, scale and lighting jitter.  The landmark set is a fixed layout in
normalized ellipse coordinates, so the generator and the synthetic detector
recover identical points from the silhouette.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import FACE_SIZE, FaceSample
from .errors import NoFaceFound

BACKGROUND = np.array([0.0, 1.0, 0.0])

# (x, y) in units of the face's semi-axes, y pointing down
LANDMARK_LAYOUT = {
    "eye_left": (-0.40, -0.30),
    "eye_right": (0.40, -0.30),
    "nose_bridge": (0.00, -0.08),
    "nose_tip": (0.00, 0.15),
    "cheek_left": (-0.75, 0.20),
    "cheek_right": (0.75, 0.20),
    "mouth_left": (-0.30, 0.50),
    "mouth_right": (0.30, 0.50),
    "jaw_left": (-0.85, 0.50),
    "jaw_right": (0.85, 0.50),
    "chin": (0.00, 0.97),
}
LANDMARK_NAMES = tuple(LANDMARK_LAYOUT)
LANDMARK_COORDS = np.array([LANDMARK_LAYOUT[n] for n in LANDMARK_NAMES])


@dataclass(frozen=True)
class SyntheticIdentity:
    name: str
    gender: str
    skin: tuple
    half_width: float
    half_height: float
    eye_spacing: float
    eye_height: float
    eye_radius: float
    iris: tuple
    brow: float
    hair: tuple
    hairline: float
    nose_length: float
    lips: tuple
    mouth_width: float


def make_identity(rng, name, gender=None):
    if gender is None:
        gender = "male" if rng.random() < 0.5 else "female"
    tone = rng.uniform(0.35, 0.9)
    skin = (tone, tone * rng.uniform(0.72, 0.86), tone * rng.uniform(0.55, 0.72))
    hair_tone = rng.uniform(0.05, 0.7)
    return SyntheticIdentity(
        name=name,
        gender=gender,
        skin=tuple(float(c) for c in skin),
        half_width=float(rng.uniform(33, 38) if gender == "male" else rng.uniform(31, 36)),
        half_height=float(rng.uniform(41, 46)),
        eye_spacing=float(rng.uniform(0.32, 0.46)),
        eye_height=float(rng.uniform(-0.36, -0.24)),
        eye_radius=float(rng.uniform(0.09, 0.14)),
        iris=tuple(float(c) for c in rng.uniform(0.05, 0.6, size=3)),
        brow=float(rng.uniform(0.2, 0.9)),
        hair=(hair_tone, hair_tone * rng.uniform(0.6, 1.0), hair_tone * rng.uniform(0.3, 0.8)),
        hairline=float(rng.uniform(-0.78, -0.55)),
        nose_length=float(rng.uniform(0.15, 0.3)),
        lips=tuple(float(c) for c in (rng.uniform(0.5, 0.85), rng.uniform(0.15, 0.4), rng.uniform(0.2, 0.4))),
        mouth_width=float(rng.uniform(0.22, 0.34)),
    )


def _blend(canvas, region, color, alpha=1.0):
    color = np.asarray(color, dtype=np.float64)
    w = np.clip(region * alpha, 0.0, 1.0)[..., None]
    return canvas * (1 - w) + color * w


def _soft(d, width=0.04):
    # smooth indicator of d < 0
    return 1.0 / (1.0 + np.exp(np.clip(d / width, -50, 50)))


def render_identity(identity, rng):
    """One image of ``identity`` with per-image jitter. Returns (image, landmarks)."""
    scale = rng.uniform(0.96, 1.04)
    cx = FACE_SIZE / 2 - 0.5 + rng.uniform(-3, 3)
    cy = FACE_SIZE / 2 - 0.5 + rng.uniform(-3, 3)
    a = identity.half_width * scale
    b = identity.half_height * scale
    light = rng.uniform(-0.5, 0.5)
    gain = rng.uniform(0.92, 1.08)

    ys, xs = np.mgrid[0:FACE_SIZE, 0:FACE_SIZE].astype(np.float64)
    X = (xs - cx) / a
    Y = (ys - cy) / b
    r2 = X**2 + Y**2
    inside = r2 <= 1.0
    Z = np.sqrt(np.clip(1.0 - r2, 0.0, 1.0))

    shade = 0.55 + 0.45 * np.clip(Z * 0.9 + X * light * 0.4, 0.0, 1.0)
    canvas = np.broadcast_to(np.asarray(identity.skin), (FACE_SIZE, FACE_SIZE, 3)).copy()

    hair = _soft(Y - identity.hairline - 0.08 * X**2)
    canvas = _blend(canvas, hair, identity.hair)
    if identity.gender == "male":
        canvas = _blend(canvas, _soft(0.35 - Y, 0.08), identity.hair, alpha=0.25)

    for side in (-1, 1):
        ex = side * identity.eye_spacing
        ey = identity.eye_height
        d_eye = np.sqrt(((X - ex) / 1.6) ** 2 + (Y - ey) ** 2) - identity.eye_radius
        canvas = _blend(canvas, _soft(d_eye, 0.02), (0.95, 0.95, 0.93))
        d_iris = np.sqrt((X - ex) ** 2 + (Y - ey) ** 2) - identity.eye_radius * 0.55
        canvas = _blend(canvas, _soft(d_iris, 0.02), identity.iris)
        d_brow = np.abs(Y - (ey - identity.eye_radius - 0.08)) - 0.025
        d_brow = np.maximum(d_brow, np.abs(X - ex) - 0.18)
        canvas = _blend(canvas, _soft(d_brow, 0.015), identity.hair, alpha=identity.brow)

    d_nose = np.maximum(np.abs(X) - 0.06, np.abs(Y - identity.nose_length / 2) - identity.nose_length / 2)
    canvas = _blend(canvas, _soft(d_nose, 0.03), np.asarray(identity.skin) * 0.7)

    d_mouth = np.sqrt((X / identity.mouth_width) ** 2 + ((Y - 0.52) / 0.06) ** 2) - 1.0
    canvas = _blend(canvas, _soft(d_mouth, 0.1), identity.lips)

    canvas = canvas * shade[..., None] * gain
    canvas = canvas + rng.normal(0.0, 0.01, size=canvas.shape)
    canvas = np.clip(canvas, 0.02, 0.98)

    image = np.where(inside[..., None], canvas, BACKGROUND)
    return image, silhouette_landmarks(image)


def face_silhouette(image):
    """Boolean face region of a chroma-keyed image, holes filled."""
    diff = np.abs(np.asarray(image, dtype=np.float64) - BACKGROUND).max(axis=-1)
    return ndimage.binary_fill_holes(diff > 1e-3)


def silhouette_ellipse(image):
    """(cx, cy, a, b) of the face silhouette's bounding ellipse."""
    sil = face_silhouette(image)
    if sil.sum() < 200:
        raise NoFaceFound("no face region found in image")
    if sil[0].any() or sil[-1].any() or sil[:, 0].any() or sil[:, -1].any():
        raise NoFaceFound("face region touches the image border")
    rows = np.flatnonzero(sil.any(axis=1))
    cols = np.flatnonzero(sil.any(axis=0))
    cx = (cols[0] + cols[-1]) / 2.0
    cy = (rows[0] + rows[-1]) / 2.0
    a = (cols[-1] - cols[0]) / 2.0 + 0.5
    b = (rows[-1] - rows[0]) / 2.0 + 0.5
    return cx, cy, a, b


def silhouette_landmarks(image):
    cx, cy, a, b = silhouette_ellipse(image)
    pts = np.empty_like(LANDMARK_COORDS)
    pts[:, 0] = cx + a * LANDMARK_COORDS[:, 0]
    pts[:, 1] = cy + b * LANDMARK_COORDS[:, 1]
    return pts


def blank_frame():
    return np.broadcast_to(BACKGROUND, (FACE_SIZE, FACE_SIZE, 3)).copy()


def make_identities(n, rng, prefix="id"):
    """``n`` identities with alternating genders (equal split for even n)."""
    return [make_identity(rng, f"{prefix}{i:03d}", "male" if i % 2 == 0 else "female") for i in range(n)]


def faces_for(identity, n_images, rng, start=0):
    faces = []
    for k in range(start, start + n_images):
        image, landmarks = render_identity(identity, rng)
        faces.append(FaceSample(image, landmarks, identity.name, key=f"{identity.name}/{k:03d}",
                                attributes={"gender": identity.gender}))
    return faces


def synthetic_dataset(n_identities, n_images, seed=0, prefix="id"):
    """Faces of ``n_identities`` procedural people, ``n_images`` each, identity-major order."""
    rng = np.random.default_rng(seed)
    faces = []
    for identity in make_identities(n_identities, rng, prefix):
        faces.extend(faces_for(identity, n_images, rng))
    return faces


def synthetic_split(n_identities, n_gallery, n_probe, seed=0, prefix="id"):
    """(gallery_faces, probe_faces) drawn from the same identities."""
    rng = np.random.default_rng(seed)
    gallery, probes = [], []
    for identity in make_identities(n_identities, rng, prefix):
        gallery.extend(faces_for(identity, n_gallery, rng))
        probes.extend(faces_for(identity, n_probe, rng, start=n_gallery))
    return gallery, probes
