"""Named tensor archive: the checkpoint container.

Layout::

    b"NTAR"                  4-byte magic
    uint64 little-endian     manifest length in bytes
    manifest                 UTF-8 JSON
    blob                     concatenated little-endian float64 tensors

The manifest is ``{"version": 1, "tensors": [{"name", "shape", "dtype": "f64",
"offset", "length"}, ...], "meta": {...}}`` with offsets relative to the blob start.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NTAR"
FORMAT_VERSION = 1


def save_archive(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "f64", "offset": offset, "length": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"version": FORMAT_VERSION, "tensors": entries, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for raw in chunks:
            f.write(raw)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a named tensor archive")
    (mlen,) = struct.unpack("<Q", data[4:12])
    manifest = json.loads(data[12 : 12 + mlen].decode("utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported archive version {manifest.get('version')}")
    blob = memoryview(data)[12 + mlen :]
    out = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "f64":
            raise ValueError(f"{path}: unsupported dtype {e['dtype']}")
        raw = blob[e["offset"] : e["offset"] + e["length"]]
        if len(raw) != e["length"]:
            raise ValueError(f"{path}: truncated tensor {e['name']}")
        out[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return out, manifest.get("meta", {})
