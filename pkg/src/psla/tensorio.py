"""Binary tensor files and parameter checkpoints.

File layout: magic "PSLA", format version as u16 little-endian, dtype code u8
(0 = 32-bit float, little-endian), rank u8, one u32 little-endian per dim,
then the raw row-major data. Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import IOFormatError

MAGIC = b"PSLA"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 0


def tensor_bytes(array) -> bytes:
    """Serialize an array (cast to little-endian float32) to the wire format."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<HBB", FORMAT_VERSION, DTYPE_FLOAT32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + arr.tobytes()


def write_tensor(path, array):
    Path(path).write_bytes(tensor_bytes(array))


def read_tensor(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise IOFormatError(f"{path}: bad magic {blob[:4]!r}")
    version, dtype_code, rank = struct.unpack("<HBB", blob[4:8])
    if version != FORMAT_VERSION:
        raise IOFormatError(f"{path}: unsupported format version {version}")
    if dtype_code != DTYPE_FLOAT32:
        raise IOFormatError(f"{path}: unsupported dtype code {dtype_code}")
    dims = struct.unpack(f"<{rank}I", blob[8 : 8 + 4 * rank])
    expected = 8 + 4 * rank + 4 * int(np.prod(dims, dtype=np.int64))
    if len(blob) != expected:
        raise IOFormatError(f"{path}: payload is {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob[8 + 4 * rank :], dtype="<f4").copy()
    return data.reshape(dims)


def write_checkpoint(directory, layers: dict) -> Path:
    """Write one tensor file per named layer plus a manifest with hashes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(layers):
        blob = tensor_bytes(layers[name])
        filename = f"{name}.psla"
        (directory / filename).write_bytes(blob)
        entries.append(
            {
                "name": name,
                "shape": list(np.asarray(layers[name]).shape),
                "file": filename,
                "sha256": hashlib.sha256(blob).hexdigest(),
            }
        )
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"layers": entries}, indent=2, sort_keys=True))
    return manifest


def read_checkpoint(directory) -> dict:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    layers = {}
    for entry in manifest["layers"]:
        blob = (directory / entry["file"]).read_bytes()
        digest = hashlib.sha256(blob).hexdigest()
        if digest != entry["sha256"]:
            raise IOFormatError(f"{entry['file']}: content hash mismatch")
        arr = read_tensor(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise IOFormatError(f"{entry['file']}: shape {list(arr.shape)} != manifest")
        layers[entry["name"]] = arr
    return layers
