"""Checkpoint directories: ``manifest.json`` + ``tensors.bin``.

The binary file is every tensor as little-endian float32, row-major,
concatenated in manifest order. Reserved name prefixes:

* ``running/`` batch-norm running statistics
* ``adam/<net>/`` optimizer moments and step counter
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

from bssgan.errors import DataError

MANIFEST = "manifest.json"
BLOB = "tensors.bin"
RUNNING_PREFIX = "running/"
ADAM_PREFIX = "adam/"


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {"format": 1, "meta": dict(meta or {}), "tensors": entries}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def read_manifest(path: str | os.PathLike) -> dict:
    path = Path(path)
    if not (path / MANIFEST).is_file():
        raise DataError(f"no checkpoint at {path} (missing {MANIFEST})")
    return json.loads((path / MANIFEST).read_text())


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = read_manifest(path)
    blob = np.fromfile(path / BLOB, dtype="<f4")
    tensors = {}
    for entry in manifest["tensors"]:
        start = entry["offset"] // 4
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if start + count > blob.size:
            raise DataError(f"checkpoint {path} is truncated at tensor {entry['name']!r}")
        tensors[entry["name"]] = blob[start : start + count].reshape(entry["shape"]).astype(np.float32)
    return tensors, manifest["meta"]
