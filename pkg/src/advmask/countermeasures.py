"""Defenses: digital mask substitution and adversarial-training data generation."""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import FaceSample, save_image
from .errors import AdvMaskError, InvalidConfig
from .masks import MaskTexture, standard_mask
from .renderer import (IDENTITY, AugmentationConfig, detect_landmarks, face_stream, reconstruct_uv,
                       render_many, sample_augmentation)

log = logging.getLogger(__name__)

ALWAYS = "always"
MASK_DETECTED = "mask_detected"


@dataclass
class SanitizationPolicy:
    """What to paint over the lower face, and when.

    ``mask_detected`` needs a ``mask_detector`` callable (image -> bool)
    passed to ``substitute_mask``; none ships with the package.
    """

    replacement_texture: MaskTexture = field(default_factory=lambda: standard_mask("blue"))
    apply_when: str = ALWAYS

    def __post_init__(self):
        if self.apply_when not in (ALWAYS, MASK_DETECTED):
            raise InvalidConfig(f"apply_when must be {ALWAYS!r} or {MASK_DETECTED!r}")


def substitute_mask(image, landmarks=None, policy=None, landmark_backend="synthetic",
                    reconstruction_backend="ellipsoid", mask_detector=None):
    """Replace whatever covers the lower face with the policy's standard texture.

    Landmarks are detected when not supplied.  Returns a numpy image.
    """
    policy = policy or SanitizationPolicy()
    image = np.asarray(image, dtype=np.float64)
    if policy.apply_when == MASK_DETECTED:
        if mask_detector is None:
            raise InvalidConfig("policy applies only to detected masks but no mask_detector was given")
        if not mask_detector(image):
            return image.copy()
    if landmarks is None:
        landmarks = detect_landmarks(image, landmark_backend)
    face = FaceSample(image, landmarks, identity="")
    uv = reconstruct_uv(image, landmarks, reconstruction_backend)
    with torch.no_grad():
        return render_many(policy.replacement_texture, [face], [uv], [IDENTITY])[0].numpy()


def sanitize_faces(faces, policy=None, **kw):
    """FaceSamples with the worn mask substituted (landmarks re-used)."""
    return [FaceSample(substitute_mask(f.image, f.landmarks, policy, **kw), f.landmarks, f.identity,
                       key=f"{f.key}#sanitized", attributes=dict(f.attributes)) for f in faces]


# ----------------------------------------------------- adversarial training

@dataclass(frozen=True)
class ManifestRow:
    source_path: str
    output_path: str
    mask_name: str
    identity: str
    seed: int


@dataclass
class TrainingManifest:
    rows: list
    failures: list = field(default_factory=list)

    FIELDS = ("source_path", "output_path", "mask_name", "identity", "seed")

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.FIELDS)
            for row in self.rows:
                writer.writerow([getattr(row, k) for k in self.FIELDS])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            return cls([ManifestRow(r["source_path"], r["output_path"], r["mask_name"], r["identity"],
                                    int(r["seed"])) for r in csv.DictReader(fh)])


def _safe(name):
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def generate_adv_training_set(dataset, masks, rng, out_dir, augmentation=None, backend="ellipsoid"):
    """Write each source image plus one masked copy per texture in ``masks``.

    ``masks`` maps a name (e.g. ``adv_universal``) to a MaskTexture.  Every
    source image gets one seed from ``rng``; each copy's augmentation is
    drawn from a stream keyed by that seed and the mask name.  Images that
    fail to render are logged in ``failures`` and skipped.
    """
    if not masks:
        raise InvalidConfig("generate_adv_training_set needs at least one mask")
    augmentation = AugmentationConfig() if augmentation is None else augmentation
    out_dir = Path(out_dir)
    manifest = TrainingManifest([])
    for n, face in enumerate(dataset):
        seed = int(rng.integers(0, 2**31 - 1))
        source = face.key
        stem = f"{n:05d}_{_safe(Path(source).stem)}"
        folder = out_dir / _safe(face.identity)
        original = folder / f"{stem}__original.png"
        save_image(original, face.image)
        manifest.rows.append(ManifestRow(source, str(original), "none", face.identity, seed))
        for name in masks:
            try:
                uv = face.uv if face.uv is not None else reconstruct_uv(face.image, face.landmarks, backend)
                params = sample_augmentation(face_stream(seed, name), augmentation)
                with torch.no_grad():
                    image = render_many(masks[name], [face], [uv], [params])[0].numpy()
            except AdvMaskError as exc:
                log.warning("skipping %s with mask %s: %s", source, name, exc)
                manifest.failures.append({"source_path": source, "mask_name": name, "error": str(exc)})
                continue
            path = folder / f"{stem}__{_safe(name)}.png"
            save_image(path, image)
            manifest.rows.append(ManifestRow(source, str(path), name, face.identity, seed))
    return manifest
