import numpy as np
import pytest

from advmask.countermeasures import (SanitizationPolicy, TrainingManifest, generate_adv_training_set,
                                     sanitize_faces, substitute_mask)
from advmask.data import load_image
from advmask.errors import InvalidConfig, NoFaceFound
from advmask.masks import random_mask, standard_mask
from advmask.renderer import masked_sample
from advmask.synthetic import blank_frame


def test_substitution_idempotent(faces):
    worn = masked_sample(random_mask(np.random.default_rng(0)), faces[0])
    once = substitute_mask(worn.image, worn.landmarks)
    twice = substitute_mask(once, worn.landmarks)
    assert np.array_equal(once, twice)


def test_substitution_local(faces):
    face = faces[1]
    out = substitute_mask(face.image, face.landmarks)
    reference = masked_sample(standard_mask("blue"), face).image
    changed = (out != face.image).any(axis=-1)
    assert changed.any()
    assert np.array_equal(out, reference)


def test_substitution_detects_landmarks(faces):
    face = faces[2]
    assert np.array_equal(substitute_mask(face.image), substitute_mask(face.image, face.landmarks))
    with pytest.raises(NoFaceFound):
        substitute_mask(blank_frame())


def test_mask_detected_policy(faces):
    policy = SanitizationPolicy(apply_when="mask_detected")
    face = faces[0]
    with pytest.raises(InvalidConfig):
        substitute_mask(face.image, face.landmarks, policy)
    kept = substitute_mask(face.image, face.landmarks, policy, mask_detector=lambda img: False)
    assert np.array_equal(kept, face.image)
    with pytest.raises(InvalidConfig):
        SanitizationPolicy(apply_when="sometimes")


def test_sanitized_faces_keep_labels(faces):
    out = sanitize_faces(faces[:3])
    assert [f.identity for f in out] == [f.identity for f in faces[:3]]


def test_manifest_counts_and_determinism(tmp_path, faces):
    masks = {"adv_universal": random_mask(np.random.default_rng(1)), "blue": standard_mask("blue")}
    a = generate_adv_training_set(faces[:1], masks, np.random.default_rng(3), tmp_path / "a")
    assert len(a.rows) == 3
    a.to_csv(tmp_path / "a.csv")
    b = generate_adv_training_set(faces[:1], masks, np.random.default_rng(3), tmp_path / "a")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    big = generate_adv_training_set(faces[:4], masks, np.random.default_rng(3), tmp_path / "c")
    assert len(big.rows) == 4 * (1 + len(masks))
    for row in TrainingManifest.from_csv(tmp_path / "a.csv").rows:
        assert load_image(row.output_path).shape == (112, 112, 3)
    with pytest.raises(InvalidConfig):
        generate_adv_training_set(faces[:1], {}, np.random.default_rng(0), tmp_path / "d")


def test_render_failures_recorded(tmp_path, faces):
    from advmask.masks import MaskTexture
    from advmask.renderer import AugmentationConfig
    tiny = MaskTexture(np.zeros((60, 112, 3)), np.ones((60, 112)))
    far = AugmentationConfig(translation=(400.0, 400.0))
    manifest = generate_adv_training_set(faces[:2], {"far": tiny}, np.random.default_rng(0), tmp_path, far)
    assert len(manifest.rows) == 2 and len(manifest.failures) == 2
