"""Binary container used for dataset and checkpoint files.

Layout: 4-byte magic, little-endian u32 format version, u64 header length,
canonical JSON header (sorted keys, compact separators), then the raw bytes
of each array in the order declared by header["arrays"]. Arrays are stored
row-major as little-endian float64 or int64. Writing the result of a read
reproduces the original bytes exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"VANC"
VERSION = 1


def write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    table = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8", copy=False)
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i8")
        else:
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    full = dict(header)
    full["arrays"] = table
    raw = json.dumps(full, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (header-without-array-table, arrays in declared order)."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a container file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        arrays = {}
        for entry in header.pop("arrays"):
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise ValueError(f"{path}: truncated array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return header, arrays
