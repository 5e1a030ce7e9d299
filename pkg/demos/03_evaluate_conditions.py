"""Scoring probes under different mask conditions.

Enrollment uses the mask-augmented gallery (each image plus one copy wearing
a standard mask).  Run 02_train_universal.py first for the adversarial mask;
without it the adv condition is skipped.
"""
# %%
from pathlib import Path

from advmask.embedding import build_gallery, toy_model
from advmask.evaluation import SimilarityReport, eval_similarity
from advmask.optimizer import load_checkpoint, substream
from advmask.plots import similarity_boxplot
from advmask.synthetic import synthetic_dataset, synthetic_split

out = Path("demo-out")
gallery_faces, probes = synthetic_split(20, 5, 3, seed=7)
model = toy_model("toy")
gallery = build_gallery(model, gallery_faces, "mask_augmented", rng=substream(7, "gallery"))
controls = synthetic_dataset(2, 1, seed=99, prefix="control")

# %%
ckpt = out / "universal"
texture = load_checkpoint(ckpt)[0] if (ckpt / "mask.png").exists() else None
conditions = ["clean", "blue", "black", "white", "random", "male_face", "female_face"]
if texture is not None:
    conditions.append("adv")

report = SimilarityReport()
for cond in conditions:
    report = report + eval_similarity(cond, probes, model, gallery, substream(7, cond), texture=texture,
                                      control_faces=controls)
    print(f"{cond:12s} mean cosine {report.mean(cond):.3f}")

# %%
report.to_csv(out / "report.csv")
similarity_boxplot(report, out / "similarity_boxplot.png")
