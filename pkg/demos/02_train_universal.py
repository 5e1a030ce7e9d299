"""Training a universal adversarial mask against a toy recognizer.

The toy embedder is a frozen random conv net calibrated on synthetic faces.
The mask starts white and is optimized with Adam on the similarity loss plus
a small total-variation penalty.  Set ITERATIONS to trade time for strength.
"""
# %%
import os
from pathlib import Path

from advmask.embedding import build_gallery, toy_model
from advmask.masks import white_mask
from advmask.optimizer import OptimizerConfig, optimize_universal, save_checkpoint
from advmask.synthetic import synthetic_split

out = Path("demo-out") / "universal"
iterations = int(os.environ.get("ITERATIONS", 200))

gallery_faces, probes = synthetic_split(20, 5, 3, seed=7)
model = toy_model("toy")

# %% Training targets come from plain (unmasked) enrollment of the training images.
gallery = build_gallery(model, gallery_faces, "plain")
config = OptimizerConfig(max_iterations=iterations, seed=7)


def progress(record):
    if record.iteration % 25 == 0:
        print(f"iter {record.iteration:4d}  sim {record.sim_loss:.3f}  tv {record.tv_loss:.3f}")


mask, history = optimize_universal(white_mask(), gallery_faces, [model], [gallery], config, callback=progress)

# %% Checkpoint: mask.png, mask.support.png, mask.meta.json, history.csv
save_checkpoint(out, mask, history, [model], gallery_faces)
print("saved", out)
