"""Checkpoint format: a JSON manifest plus one binary blob.

The manifest lists tensor name, shape, and byte offset into the blob of
little-endian float64 values, carries a format version, and holds arbitrary
JSON metadata (step counter, configs, seeds). Loaders reject versions they
do not understand.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import DataFormatError

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


def save_checkpoint(directory, tensors: dict[str, np.ndarray], meta: dict) -> None:
    os.makedirs(directory, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        if not arr.flags.c_contiguous:  # ascontiguousarray would promote 0-d to 1-d
            arr = np.ascontiguousarray(arr)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format_version": FORMAT_VERSION, "tensors": entries, "meta": meta}
    with open(os.path.join(directory, BLOB_NAME), "wb") as fh:
        for chunk in chunks:
            fh.write(chunk)
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DataFormatError(
            f"{manifest_path}: format version {version!r} not supported (expected {FORMAT_VERSION})"
        )
    with open(os.path.join(directory, BLOB_NAME), "rb") as fh:
        blob = fh.read()
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64).copy()
    return tensors, manifest.get("meta", {})
