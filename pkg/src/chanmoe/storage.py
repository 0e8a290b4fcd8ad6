"""
Binary tensor formats.

``WM4D`` records hold one array each::

    magic b"WM4D" | version u32 | dtype code u32 | rank u32 | dims u64 * rank | payload

All fields little-endian, payload row-major. A ``.wm4d`` file is a plain
concatenation of records.

``WM4C`` containers hold named tensors plus JSON metadata::

    magic b"WM4C" | version u32 | manifest length u64 | manifest (UTF-8 JSON) | payload

The manifest maps each name to ``{"dtype", "shape", "offset", "nbytes"}``
with offsets relative to the start of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import BinaryIO, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .exceptions import LoadError

TENSOR_MAGIC = b"WM4D"
CONTAINER_MAGIC = b"WM4C"
FORMAT_VERSION = 1

DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<c8"): 3,
    np.dtype("<c16"): 4,
    np.dtype("<i4"): 5,
    np.dtype("<i8"): 6,
    np.dtype("u1"): 7,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}


def _le(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    dt = array.dtype.newbyteorder("<") if array.dtype.itemsize > 1 else array.dtype
    if dt not in DTYPE_CODES:
        raise TypeError(f"unsupported dtype {array.dtype}")
    # asarray keeps 0-d arrays 0-d, unlike ascontiguousarray.
    return np.asarray(array, dtype=dt, order="C")


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    array = _le(array)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<III", FORMAT_VERSION, DTYPE_CODES[array.dtype], array.ndim))
    fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    fh.write(array.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> Optional[np.ndarray]:
    """Next record from ``fh``, or ``None`` at end of file."""
    magic = fh.read(4)
    if not magic:
        return None
    if magic != TENSOR_MAGIC:
        raise LoadError(f"bad tensor magic {magic!r}")
    version, code, rank = struct.unpack("<III", fh.read(12))
    if version != FORMAT_VERSION:
        raise LoadError(f"unsupported tensor format version {version}")
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    dtype = CODE_DTYPES[code]
    count = int(np.prod(dims)) if rank else 1
    payload = fh.read(count * dtype.itemsize)
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def save_tensors(path, arrays) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        for array in arrays:
            write_tensor(fh, array)


def load_tensors(path) -> List[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while (array := read_tensor(fh)) is not None:
            out.append(array)
    return out


def save_named(path, tensors: Mapping[str, np.ndarray], metadata: Optional[dict] = None) -> None:
    """Write a named-tensor container."""
    entries, blobs, offset = {}, [], 0
    for name in sorted(tensors):
        array = _le(tensors[name])
        blob = array.tobytes(order="C")
        entries[name] = {"dtype": DTYPE_CODES[array.dtype], "shape": list(array.shape),
                         "offset": offset, "nbytes": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"tensors": entries, "metadata": metadata or {}},
                          sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_named(path) -> Tuple[Dict[str, np.ndarray], dict]:
    """Read a named-tensor container; returns ``(tensors, metadata)``."""
    with open(path, "rb") as fh:
        if fh.read(4) != CONTAINER_MAGIC:
            raise LoadError(f"{path} is not a WM4C container")
        version, length = struct.unpack("<IQ", fh.read(12))
        if version != FORMAT_VERSION:
            raise LoadError(f"unsupported container version {version}")
        manifest = json.loads(fh.read(length).decode("utf-8"))
        payload = fh.read()
    tensors = {}
    for name, entry in manifest["tensors"].items():
        dtype = CODE_DTYPES[entry["dtype"]]
        chunk = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        tensors[name] = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).copy()
    return tensors, manifest["metadata"]


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]
