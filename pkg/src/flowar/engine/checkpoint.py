"""Single-file chunked binary checkpoints.

Byte layout (all integers little-endian)::

    magic       8 bytes   b"FLOWARCK"
    version     u32       currently 1
    digest      32 bytes  SHA-256 of the config JSON chunk payload
    n_chunks    u32
    chunk * n_chunks:
        name_len  u16, name  utf-8 bytes
        dtype     u8   1=float32 2=float64 3=int64 4=uint8
        ndim      u8,  dims  u32 * ndim
        nbytes    u64, payload (C-order, little-endian)

The config is stored as the uint8 chunk ``meta/config`` (UTF-8 JSON).
Other chunk prefixes: ``param/`` model weights, ``norm/`` latent
normalization stats, ``codec/`` codec matrices, ``optim/`` AdamW moments,
``meta/step`` the training step counter.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FLOWARCK"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
_CODES = {v.str: k for k, v in _DTYPES.items()}


class CheckpointError(IOError):
    pass


def config_digest(config_json: str) -> bytes:
    return hashlib.sha256(config_json.encode("utf-8")).digest()


def _code(arr: np.ndarray) -> tuple[int, np.ndarray]:
    if arr.dtype.kind == "f":
        arr = arr.astype("<f4" if arr.dtype.itemsize == 4 else "<f8", copy=False)
    elif arr.dtype.kind in "iu" and arr.dtype != np.uint8:
        arr = arr.astype("<i8", copy=False)
    elif arr.dtype == np.bool_:
        arr = arr.astype("u1")
    code = _CODES.get(arr.dtype.str)
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return code, arr


def write_checkpoint(path, config: dict, arrays: dict[str, np.ndarray]) -> None:
    config_json = json.dumps(config, sort_keys=True)
    chunks = {"meta/config": np.frombuffer(config_json.encode("utf-8"), dtype=np.uint8)}
    chunks.update(arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(config_digest(config_json))
        fh.write(struct.pack("<I", len(chunks)))
        for name, arr in chunks.items():
            code, arr = _code(np.ascontiguousarray(np.asarray(arr)))
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            data = arr.tobytes()
            fh.write(struct.pack("<Q", len(data)))
            fh.write(data)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(config, arrays)``; raises :class:`CheckpointError` on any corruption."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    digest = blob[12:44]
    (n,) = struct.unpack_from("<I", blob, 44)
    off = 48
    arrays = {}
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + ln].decode("utf-8")
            off += ln
            code, ndim = struct.unpack_from("<BB", blob, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", blob, off)
            off += 8
            arr = np.frombuffer(blob[off:off + nbytes], dtype=_DTYPES[code]).reshape(shape).copy()
            off += nbytes
            arrays[name] = arr
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt chunk table") from exc
    config_json = arrays.pop("meta/config").tobytes().decode("utf-8")
    if config_digest(config_json) != digest:
        raise CheckpointError(f"{path}: config digest mismatch")
    return json.loads(config_json), arrays
