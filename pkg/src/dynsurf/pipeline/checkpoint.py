"""Single-file versioned checkpoints: header, JSON manifest, little-endian float64 blocks."""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

MAGIC = b"DSURFCKP"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], meta: dict) -> str:
    """Write atomically (temp file then rename); returns the sha256 of the file."""
    blocks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.asarray(arr)
        data = np.ascontiguousarray(a, dtype="<f8").tobytes()
        blocks.append({"name": name, "shape": list(a.shape), "dtype": str(a.dtype), "offset": offset,
                       "nbytes": len(data)})
        offset += len(data)
    manifest = json.dumps({"meta": meta, "blocks": blocks}, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    h = hashlib.sha256()
    with open(tmp, "wb") as fh:
        for chunk in (_HEADER.pack(MAGIC, VERSION, len(manifest)), manifest):
            fh.write(chunk)
            h.update(chunk)
        for name, arr in arrays.items():
            data = np.ascontiguousarray(np.asarray(arr), dtype="<f8").tobytes()
            fh.write(data)
            h.update(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return h.hexdigest()


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read arrays (restored to their saved dtype) and the metadata dict."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"truncated checkpoint: {path}")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} in {path}")
    try:
        manifest = json.loads(raw[_HEADER.size:_HEADER.size + mlen])
    except ValueError as exc:
        raise CheckpointError(f"corrupt manifest in {path}") from exc
    base = _HEADER.size + mlen
    arrays = {}
    for b in manifest["blocks"]:
        start = base + b["offset"]
        if start + b["nbytes"] > len(raw):
            raise CheckpointError(f"block '{b['name']}' runs past the end of {path}")
        a = np.frombuffer(raw, dtype="<f8", count=b["nbytes"] // 8, offset=start)
        arrays[b["name"]] = a.reshape(b["shape"]).astype(b["dtype"])
    return arrays, manifest["meta"]


def file_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
