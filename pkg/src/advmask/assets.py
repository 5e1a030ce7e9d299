"""Location and integrity checks for pretrained assets (never downloaded implicitly)."""

import hashlib
import os
from pathlib import Path

from .errors import AssetMissing, ChecksumMismatch

ENV_VAR = "ADVMASK_ASSET_DIR"


def asset_dir():
    return Path(os.environ.get(ENV_VAR, Path.home() / ".cache" / "advmask"))


def resolve(path):
    """Relative asset paths resolve against the asset directory."""
    path = Path(path)
    return path if path.is_absolute() else asset_dir() / path


def sha256_file(path, chunk=1 << 20):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while block := fh.read(chunk):
            h.update(block)
    return h.hexdigest()


def verified_path(path, checksum=None):
    path = resolve(path)
    if not path.exists():
        raise AssetMissing(f"asset not found: {path} (set {ENV_VAR} or run `advmask fetch`)", path=path)
    if checksum:
        actual = sha256_file(path)
        if actual != checksum.lower():
            raise ChecksumMismatch(f"checksum mismatch for {path}: expected {checksum}, got {actual}", path=path)
    return path
