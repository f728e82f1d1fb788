"""Versioned, byte-reproducible checkpoint files.

Layout::

    b"TRAILCKPT"  (9 bytes magic)
    uint16        format version (little endian)
    uint32        header length
    header        UTF-8 JSON: kind, metadata, tensor table (name, dtype, shape, offset)
    payload       raw little-endian tensor bytes, in table order

Identity of a checkpoint is the sha256 of the whole file.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"TRAILCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def state_dict_sha256(state_dict):
    h = hashlib.sha256()
    for name in sorted(state_dict):
        arr = state_dict[name].detach().cpu().contiguous().numpy()
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(path, kind, state_dict, meta=None):
    """Write ``state_dict`` with a JSON header; returns the file's sha256."""
    table = []
    blobs = []
    offset = 0
    for name in sorted(state_dict):
        arr = state_dict[name].detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"kind": kind, "meta": meta or {}, "tensors": table}, sort_keys=True
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    return file_sha256(path)


def load_checkpoint(path, kind=None, expected_sha256=None):
    """Returns ``(state_dict, meta)``. Verifies magic, version, kind and optionally hash."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    if expected_sha256 is not None and file_sha256(path) != expected_sha256:
        raise CheckpointError(f"hash mismatch for {path}")
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack_from("<HI", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<HI")
    header = json.loads(data[start : start + hlen])
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path} holds a {header['kind']!r}, expected {kind!r}")
    payload = memoryview(data)[start + hlen :]
    state = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    return state, header["meta"]
