"""Defenses: repaint the worn mask, or generate adversarial training data.

Substitution re-renders a standard blue mask over the lower face, which
removes whatever pattern was worn there.  Needs the mask from
02_train_universal.py.
"""
# %%
from pathlib import Path

import numpy as np

from advmask.countermeasures import generate_adv_training_set, sanitize_faces
from advmask.embedding import build_gallery, toy_model
from advmask.evaluation import eval_similarity
from advmask.optimizer import load_checkpoint, substream
from advmask.renderer import masked_sample
from advmask.synthetic import synthetic_split

out = Path("demo-out")
mask, _ = load_checkpoint(out / "universal")
gallery_faces, probes = synthetic_split(20, 5, 3, seed=7)
model = toy_model("toy")
gallery = build_gallery(model, gallery_faces, "mask_augmented", rng=substream(7, "gallery"))

# %% Substitution
attacked = [masked_sample(mask, f, tag="adv") for f in probes]
before = eval_similarity("clean", attacked, model, gallery).mean()
after = eval_similarity("clean", sanitize_faces(attacked), model, gallery).mean()
print(f"adversarial {before:.3f} -> sanitized {after:.3f}")

# %% Adversarial-training manifest: originals plus one masked copy per texture
manifest = generate_adv_training_set(gallery_faces[:10], {"adv_universal": mask}, np.random.default_rng(0),
                                     out / "adv_training")
manifest.to_csv(out / "adv_training" / "manifest.csv")
print(len(manifest.rows), "rows")
