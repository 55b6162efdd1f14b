"""Binary container for parameter checkpoints and grid snapshots.

Layout::

    b"SIPG"                     4-byte magic
    uint64 little-endian        byte length of the JSON header
    header                      UTF-8 JSON: {"arrays": [{"name", "shape", "offset"}...], "meta": {...}}
    payload                     concatenated little-endian float64 data, row-major

Offsets count float64 elements from the start of the payload.  Round trips
are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SIPG"


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.size
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a grid container (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + hlen].decode())
    payload = np.frombuffer(raw, dtype="<f8", offset=12 + hlen)
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = payload[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return arrays, header.get("meta", {})


def save_grid(path, grid: np.ndarray, **meta) -> Path:
    """One array snapshot, e.g. a field at one time step."""
    return save_arrays(path, {"grid": grid}, meta)


def load_grid(path) -> np.ndarray:
    arrays, _ = load_arrays(path)
    return arrays["grid"]
