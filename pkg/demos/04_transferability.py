"""Does a mask trained on one model fool another?

Trains one single-model mask and one ensemble mask on different toy
embedders, then scores every mask against every model.
"""
# %%
import os
from pathlib import Path

from advmask.embedding import build_gallery
from advmask.masks import white_mask
from advmask.optimizer import OptimizerConfig, optimize_universal, substream
from advmask.plots import transfer_heatmap
from advmask.registry import ModelRegistry
from advmask.synthetic import synthetic_split

out = Path("demo-out")
iterations = int(os.environ.get("ITERATIONS", 100))
registry = ModelRegistry()
models = [registry.load(n) for n in ("toy", "toy-a", "toy-b", "toy-c", "toy-d")]
gallery_faces, probes = synthetic_split(12, 4, 2, seed=4)
plain = {m.name: build_gallery(m, gallery_faces, "plain") for m in models}
evaluation = {m.name: build_gallery(m, gallery_faces, "mask_augmented", rng=substream(4, "gallery")) for m in models}

# %%
def train(names):
    chosen = [m for m in models if m.name in names]
    config = OptimizerConfig(max_iterations=iterations, seed=4, ensemble=tuple(names))
    return optimize_universal(white_mask(), gallery_faces, chosen, [plain[m.name] for m in chosen], config)[0]


masks = {
    "clean": ("control", "clean", None),
    "random": ("control", "random", None),
    "toy only": ("single", "adv", train(["toy"])),
    "toy-a + toy-b": ("ensemble", "adv", train(["toy-a", "toy-b"])),
}

# %%
from advmask.evaluation import transferability_matrix  # noqa: E402

matrix = transferability_matrix(masks, models, probes, evaluation, rng=4)
for row, values in zip(matrix.rows, matrix.values):
    print(f"{row:14s}", " ".join(f"{v:6.3f}" for v in values))
matrix.to_csv(out / "matrix.csv")
transfer_heatmap(matrix, out / "transfer_heatmap.png")
