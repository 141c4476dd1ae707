"""Self-describing checkpoint container: a JSON header with shapes and
metadata followed by raw little-endian float64 arrays."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError

MAGIC = b"NNC1"


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    payload = b""
    offset = 0
    for name in sorted(arrays):
        # note: ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.asarray(arrays[name], dtype="<f8")
        raw = arr.tobytes(order="C")
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset, "nbytes": len(raw)}
        )
        payload += raw
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DataError(f"{path}: not a checkpoint container (magic {magic!r})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
    return arrays, header.get("meta", {})
