"""Binary checkpoint persistence.

Layout (all little-endian):

    8-byte magic "DVIEWCKP", u32 version, u32 tensor count,
    per tensor: u16 name length, name bytes (utf-8), u8 dtype tag
    (0 = float32, 1 = float64), u8 rank, rank x u32 dims, raw data,
    then u32 config-snapshot length + bytes, u64 step counter.

Writes are atomic (temp file + rename); loads are bitwise round-trips.
Loading into a model with different tensor shapes fails with a diff of
the mismatched names.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"DVIEWCKP"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


class CheckpointFormatError(ValueError):
    """Corrupt or incompatible checkpoint data."""


def serialize(tensors: dict[str, np.ndarray], config_text: str = "", step: int = 0) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointFormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    cb = config_text.encode("utf-8")
    out += struct.pack("<I", len(cb)) + cb
    out += struct.pack("<Q", step)
    return bytes(out)


def deserialize(blob: bytes) -> tuple[dict[str, np.ndarray], str, int]:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    off = 16
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off: off + nlen].decode("utf-8")
            off += nlen
            tag, rank = struct.unpack_from("<BB", blob, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            dtype = _TAG_DTYPES[tag]
            n = int(np.prod(dims, dtype=np.int64))
            nbytes = n * dtype.itemsize
            arr = np.frombuffer(blob[off: off + nbytes], dtype=dtype.newbyteorder("<"))
            if arr.size != n:
                raise CheckpointFormatError(f"truncated data for tensor {name!r}")
            off += nbytes
            tensors[name] = arr.astype(dtype).reshape(dims)
        (clen,) = struct.unpack_from("<I", blob, off)
        off += 4
        config_text = blob[off: off + clen].decode("utf-8")
        off += clen
        (step,) = struct.unpack_from("<Q", blob, off)
    except (struct.error, KeyError, IndexError) as exc:
        raise CheckpointFormatError(f"corrupt checkpoint: {exc}") from exc
    return tensors, config_text, step


def save(path: str, tensors: dict[str, np.ndarray], config_text: str = "", step: int = 0) -> None:
    blob = serialize(tensors, config_text, step)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str) -> tuple[dict[str, np.ndarray], str, int]:
    with open(path, "rb") as f:
        return deserialize(f.read())


def load_into(path: str, named_params) -> tuple[str, int]:
    """Restore tensor data into live parameters, strict on names/shapes."""
    tensors, config_text, step = load(path)
    mismatches = []
    for name, t in named_params.items():
        if name not in tensors:
            mismatches.append(f"missing in checkpoint: {name} {t.data.shape}")
        elif tensors[name].shape != t.data.shape:
            mismatches.append(f"shape mismatch: {name} model{t.data.shape} "
                              f"!= checkpoint{tensors[name].shape}")
    for name in tensors:
        if name not in named_params:
            mismatches.append(f"unexpected in checkpoint: {name}")
    if mismatches:
        raise CheckpointFormatError("checkpoint does not fit the model:\n  "
                                    + "\n  ".join(mismatches))
    for name, t in named_params.items():
        t.data = tensors[name].astype(t.data.dtype)
    return config_text, step
