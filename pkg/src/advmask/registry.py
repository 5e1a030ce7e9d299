"""Named embedding models described by a manifest.

Manifest (YAML or JSON)::

    models:
      - {name: toy-a, kind: toy, seed: 1, depth: 3}
      - {name: r100-arcface, kind: asset, path: arcface_r100.pt,
         checksum: <sha256>, depth: 100, loss_family: arcface}
"""

from pathlib import Path

import yaml

from .assets import verified_path
from .embedding import torchscript_model, toy_model
from .errors import InputError, UnknownModel

DEFAULT_TOYS = [
    {"name": "toy", "kind": "toy", "seed": 0, "depth": 3},
    {"name": "toy-a", "kind": "toy", "seed": 1, "depth": 3},
    {"name": "toy-b", "kind": "toy", "seed": 2, "depth": 3},
    {"name": "toy-c", "kind": "toy", "seed": 3, "depth": 2},
    {"name": "toy-d", "kind": "toy", "seed": 4, "depth": 4},
]


def read_manifest(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"model manifest not found: {path}", path=path)
    data = yaml.safe_load(path.read_text()) or {}
    entries = data.get("models", data if isinstance(data, list) else [])
    for entry in entries:
        if "name" not in entry or entry.get("kind") not in ("toy", "asset"):
            raise InputError(f"bad manifest entry {entry!r}", path=path)
    return entries


class ModelRegistry:
    """Builds models on demand and keeps loaded ones until unloaded."""

    def __init__(self, entries=None):
        self.entries = {}
        for entry in DEFAULT_TOYS + list(entries or []):
            self.entries[entry["name"]] = dict(entry)
        self.loaded = {}

    @classmethod
    def from_manifest(cls, path=None):
        return cls(read_manifest(path) if path else None)

    def available(self):
        return sorted(self.entries)

    def load(self, name):
        if name in self.loaded:
            return self.loaded[name]
        entry = self.entries.get(name)
        if entry is None:
            raise UnknownModel(f"unknown model {name!r}; known: {', '.join(self.available())}")
        if entry["kind"] == "toy":
            model = toy_model(name, seed=entry.get("seed", 0), dim=entry.get("dim", 64),
                              depth=entry.get("depth", 3), loss_family=entry.get("loss_family", "toy"))
        else:
            path = verified_path(entry["path"], entry.get("checksum"))
            model = torchscript_model(name, path, depth=entry.get("depth", 0),
                                      loss_family=entry.get("loss_family", ""))
        self.loaded[name] = model
        return model

    def unload(self, name):
        self.loaded.pop(name, None)

    def list(self):
        """Descriptions of the loaded models."""
        return [m.describe() for m in self.loaded.values()]
