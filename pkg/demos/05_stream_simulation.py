"""End-to-end recognition of a subject walking past a camera.

Calibrates a threshold on masked impostor probes,
then replays frame streams through detect -> embed -> verify and reports the
recognition rate and the 7-of-10 persistence decision.
"""
# %%
from pathlib import Path

import numpy as np

from advmask.embedding import build_gallery, toy_model
from advmask.evaluation import (calibration_probes, impostor_scores, persistence_detection, recognition_rate,
                                simulate_stream, threshold_at_far)
from advmask.masks import random_mask, standard_masks
from advmask.optimizer import load_checkpoint, substream
from advmask.renderer import AugmentationConfig, masked_sample, sample_augmentation
from advmask.synthetic import synthetic_split

gallery_faces, probes = synthetic_split(20, 5, 6, seed=7)
model = toy_model("toy")
gallery = build_gallery(model, gallery_faces, "mask_augmented", rng=substream(7, "gallery"))

# %% Threshold from masked impostors.  The toy recognizer separates identities
# far less cleanly than a trained network, so 1% FAR would reject nearly every
# genuine frame; 10% keeps the comparison between outfits visible.
masked = calibration_probes(probes, standard_masks(), substream(7, "calibrate"))
threshold = threshold_at_far(impostor_scores(model, gallery, masked), 0.10)
print(f"threshold {threshold:.3f}")

# %% One subject, three outfits; frames carry small placement jitter.
subject = probes[0].identity
frames = [f for f in probes if f.identity == subject] * 2
ckpt = Path("demo-out") / "universal"
outfits = {"clean": None, "random": random_mask(np.random.default_rng(1))}
if (ckpt / "mask.png").exists():
    outfits["adversarial"] = load_checkpoint(ckpt)[0]
rng = np.random.default_rng(5)
for name, texture in outfits.items():
    images = [f.image if texture is None else
              masked_sample(texture, f, sample_augmentation(rng, AugmentationConfig())).image for f in frames]
    events = simulate_stream(images, "passthrough", model, gallery, threshold, subject)
    print(f"{name:12s} RR {recognition_rate(events):.2f}  identified {persistence_detection(events)}")
