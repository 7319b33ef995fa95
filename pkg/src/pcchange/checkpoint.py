"""Binary checkpoint container for named float64 arrays.

Layout, all little-endian:

    magic   4 bytes  b"PCCK"
    version u32      currently 1
    count   u32      number of entries
    entry*  count times:
        name_len u32
        name     utf-8 bytes
        ndim     u32
        dims     u32 * ndim
        payload  float64 * prod(dims)

Arrays are stored in C order. A sidecar JSON manifest (same stem, suffix
`.json`) carries the architecture hyperparameters so a checkpoint can be
reloaded without the training config.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"PCCK"
VERSION = 1


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim:
            arr = np.ascontiguousarray(arr)  # keeps 0-d arrays 0-d
        enc = name.encode("utf-8")
        blob += struct.pack("<I", len(enc))
        blob += enc
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes(order="C")
    path.write_bytes(bytes(blob))


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pos)
            pos += 8 * n
            out[name] = arr.reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated or corrupt checkpoint: {exc}") from exc
    if pos != len(raw):
        raise DataError(f"{path}: trailing bytes after last entry")
    return out


def save_manifest(path: str | Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid manifest JSON: {exc}") from exc


def manifest_path(ckpt_path: str | Path) -> Path:
    return Path(ckpt_path).with_suffix(".json")
