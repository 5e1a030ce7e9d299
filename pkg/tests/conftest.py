import time

import numpy as np
import pytest
import torch

from advmask.embedding import MASK_AUGMENTED, PLAIN, build_gallery, toy_model
from advmask.masks import white_mask
from advmask.optimizer import OptimizerConfig, optimize_universal, substream
from advmask.synthetic import synthetic_dataset, synthetic_split


@pytest.fixture(scope="session")
def faces():
    """6 identities x 3 images."""
    return synthetic_dataset(6, 3, seed=11)


@pytest.fixture(scope="session")
def split():
    return synthetic_split(6, 3, 2, seed=5)


@pytest.fixture(scope="session")
def toy():
    return toy_model("toy")


@pytest.fixture(scope="session")
def toy_gallery(toy, faces):
    return build_gallery(toy, faces, "plain")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class ConstantModel:
    """Embedder that ignores its input and returns a fixed vector per image."""

    def __init__(self, vector, name="const"):
        self.vector = torch.as_tensor(np.asarray(vector, dtype=np.float64))
        self.name = name
        self.dim = len(self.vector)

    def __call__(self, images):
        n = images.shape[0]
        # keep the graph connected so gradients flow (to zero)
        return self.vector.expand(n, -1) + 0.0 * images.sum(dim=(1, 2, 3))[:, None]


SEED = 7


@pytest.fixture(scope="session")
def toy_attack():
    """Universal mask trained at toy scale: 20 identities x 5 images, 200 iterations, seed 7."""
    start = time.perf_counter()
    gallery_faces, probes = synthetic_split(20, 5, 3, seed=SEED)
    model = toy_model("toy")
    train_gallery = build_gallery(model, gallery_faces, PLAIN)
    config = OptimizerConfig(max_iterations=200, seed=SEED)
    mask, history = optimize_universal(white_mask(), gallery_faces, [model], [train_gallery], config)
    eval_gallery = build_gallery(model, gallery_faces, MASK_AUGMENTED, rng=substream(SEED, "gallery"))
    return {"model": model, "gallery_faces": gallery_faces, "probes": probes, "train_gallery": train_gallery,
            "eval_gallery": eval_gallery, "mask": mask, "history": history,
            "seconds": time.perf_counter() - start}
