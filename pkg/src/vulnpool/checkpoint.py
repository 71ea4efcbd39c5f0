"""Binary checkpoint container: manifest + raw little-endian arrays.

Layout:
    b"mulvuln-ckpt-v1\\n"
    8-byte little-endian manifest length
    canonical JSON manifest {"meta": {...}, "arrays": [{name, shape, dtype, offset}]}
    concatenated raw array bytes (C order, little-endian), in manifest order

The manifest is serialized with sorted keys and no whitespace, and arrays
are stored in sorted-name order, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

FORMAT_VERSION = "mulvuln-ckpt-v1"
_MAGIC = (FORMAT_VERSION + "\n").encode("ascii")

_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


class CheckpointError(RuntimeError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<")
        if dtype.str not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for array {name!r}")
        raw = arr.astype(dtype, copy=False).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": dtype.str, "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"meta": meta or {}, "arrays": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for raw in blobs:
            f.write(raw)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            found = magic.split(b"\n", 1)[0].decode("ascii", errors="replace")
            raise CheckpointError(
                f"{path}: format version mismatch: expected {FORMAT_VERSION!r}, found {found!r}"
            )
        (manifest_len,) = struct.unpack("<Q", f.read(8))
        manifest = json.loads(f.read(manifest_len).decode("utf-8"))
        data = f.read()
    arrays = {}
    for entry in manifest["arrays"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        stop = start + count * dtype.itemsize
        if stop > len(data):
            raise CheckpointError(f"{path}: truncated data for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            data[start:stop], dtype=dtype
        ).reshape(shape).copy()
    return arrays, manifest.get("meta", {})


def check_shapes(arrays: dict[str, np.ndarray], expected: dict[str, tuple], where: str):
    """Verify that `arrays` carries exactly the expected names and shapes."""
    problems = []
    for name, shape in expected.items():
        if name not in arrays:
            problems.append(f"missing {name} {tuple(shape)}")
        elif tuple(arrays[name].shape) != tuple(shape):
            problems.append(
                f"{name}: expected {tuple(shape)}, found {tuple(arrays[name].shape)}"
            )
    extra = sorted(set(arrays) - set(expected))
    if extra:
        problems.append(f"unexpected arrays: {', '.join(extra)}")
    if problems:
        raise CheckpointError(f"{where}: shape mismatch: " + "; ".join(problems))
