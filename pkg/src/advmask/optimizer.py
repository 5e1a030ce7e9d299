"""Iterative optimization of a universal (or per-identity) mask texture."""

import csv
import json
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import dataset_fingerprint
from .errors import InputError, InvalidConfig, MixedIdentities, NonFiniteLoss
from .losses import _pair, loss_terms
from .masks import MaskTexture
from .renderer import DTYPE, AugmentationConfig, draw_params, face_uv

UNIVERSAL = "universal"
TARGETED = "targeted"


@dataclass
class OptimizerConfig:
    lambda_tv: float = 0.1
    learning_rate: float = 1e-2
    batch_size: int = 32
    max_iterations: int = 1000
    seed: int = 0
    ensemble: tuple = ("toy",)
    mode: str = UNIVERSAL
    plateau_window: int = 0
    plateau_tol: float = 1e-4
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig.from_dict(self.augmentation)
        self.ensemble = tuple(self.ensemble)
        if self.lambda_tv < 0:
            raise InvalidConfig("lambda_tv must be >= 0")
        if self.learning_rate <= 0:
            raise InvalidConfig("learning_rate must be > 0")
        if self.batch_size < 1 or self.max_iterations < 0:
            raise InvalidConfig("batch_size must be >= 1 and max_iterations >= 0")
        if not self.ensemble:
            raise InvalidConfig("ensemble must name at least one model")
        if self.mode not in (UNIVERSAL, TARGETED):
            raise InvalidConfig(f"mode must be {UNIVERSAL!r} or {TARGETED!r}")

    def to_dict(self):
        d = asdict(self)
        d["ensemble"] = list(self.ensemble)
        d["augmentation"] = self.augmentation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**(d or {}))


@dataclass(frozen=True)
class HistoryRecord:
    iteration: int
    sim_loss: float
    tv_loss: float
    total_loss: float
    seconds: float


@dataclass
class TrainingHistory:
    records: list
    mask: MaskTexture
    config: dict

    COLUMNS = ("iteration", "sim_loss", "tv_loss", "total_loss", "seconds")

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for r in self.records:
                writer.writerow([r.iteration, repr(r.sim_loss), repr(r.tv_loss), repr(r.total_loss), f"{r.seconds:.3f}"])


def read_history_csv(path):
    with open(path, newline="") as fh:
        return [HistoryRecord(int(row["iteration"]), float(row["sim_loss"]), float(row["tv_loss"]),
                              float(row["total_loss"]), float(row["seconds"])) for row in csv.DictReader(fh)]


def substream(seed, name):
    """Named child generator of a global seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def _plateaued(sims, window, tol):
    if window <= 0 or len(sims) <= window:
        return False
    return min(sims[:-window]) - min(sims[-window:]) < tol


def _optimize(initial_mask, faces, models, galleries, config, backend, callback):
    models, galleries = _pair(models, galleries)
    if not faces:
        raise InputError("optimization needs a nonempty dataset")
    for f in faces:
        face_uv(f, backend)
    sampler = substream(config.seed, "sampling")
    render_rng = substream(config.seed, "render")
    pixels = torch.tensor(initial_mask.pixels, dtype=DTYPE, requires_grad=True)
    optimizer = torch.optim.Adam([pixels], lr=config.learning_rate)
    batch = min(config.batch_size, len(faces))
    records, sims = [], []
    start = time.perf_counter()
    for it in range(config.max_iterations):
        idx = np.sort(sampler.choice(len(faces), size=batch, replace=False))
        chosen = [faces[i] for i in idx]
        params = draw_params(chosen, render_rng, config.augmentation)
        total, sim, tv = loss_terms(initial_mask, chosen, models, galleries, config.lambda_tv,
                                    params=params, pixels=pixels, backend=backend)
        if not torch.isfinite(total):
            raise NonFiniteLoss(f"non-finite loss at iteration {it}: sim={sim.item()}, tv={tv.item()}")
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        with torch.no_grad():
            pixels.clamp_(0.0, 1.0)
        s, t = sim.item(), tv.item()
        records.append(HistoryRecord(it, s, t, s + config.lambda_tv * t, time.perf_counter() - start))
        sims.append(s)
        if callback is not None:
            callback(records[-1])
        if _plateaued(sims, config.plateau_window, config.plateau_tol):
            break
    mask = initial_mask.with_pixels(pixels)
    return mask, TrainingHistory(records, mask, config.to_dict())


def optimize_universal(initial_mask, dataset, models, galleries, config, backend="ellipsoid", callback=None):
    """One texture for every identity in ``dataset``; returns (mask, history).

    Each iteration draws a random batch, renders it with fresh augmentations
    and takes an Adam step on the loss, clamping pixels back into [0, 1].
    """
    return _optimize(initial_mask, list(dataset), models, galleries, config, backend, callback)


def optimize_targeted(initial_mask, images, models, galleries, config, backend="ellipsoid", callback=None):
    """Texture tailored to a single identity."""
    images = list(images)
    identities = {f.identity for f in images}
    if len(identities) > 1:
        raise MixedIdentities(f"targeted optimization got {len(identities)} identities")
    return _optimize(initial_mask, images, models, galleries, config, backend, callback)


# -------------------------------------------------------------- checkpoints

def save_checkpoint(out_dir, mask, history, models=(), dataset=None, extra=None):
    """mask.png, mask.support.png, mask.meta.json, history.csv under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask.save(out_dir / "mask.png")
    last = history.records[-1] if history.records else None
    meta = {
        "config": history.config,
        "seed": history.config.get("seed"),
        "iterations": len(history.records),
        "final": None if last is None else {"sim_loss": last.sim_loss, "tv_loss": last.tv_loss,
                                            "total_loss": last.total_loss},
        "initial": None if last is None else {"sim_loss": history.records[0].sim_loss},
        "models": [m if isinstance(m, str) else m.name for m in models],
        "dataset_fingerprint": dataset_fingerprint(dataset) if dataset is not None else None,
    }
    meta.update(extra or {})
    (out_dir / "mask.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")
    history.to_csv(out_dir / "history.csv")
    return out_dir / "mask.png"


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return str(obj)


def load_checkpoint(path):
    """(mask, metadata) from a checkpoint directory or a mask PNG path."""
    path = Path(path)
    png = path / "mask.png" if path.is_dir() else path
    if not png.exists():
        raise InputError(f"checkpoint not found: {path}", path=path)
    meta_path = png.with_name(png.stem + ".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return MaskTexture.load(png), meta
