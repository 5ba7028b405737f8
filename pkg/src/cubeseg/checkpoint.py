"""Binary checkpoint container (magic MGCK, versioned).

Named little-endian tensors: student/teacher parameters, optimizer momentum,
iteration counter, class-histogram state, and the resolved config as JSON
bytes. Round-trips are bit-exact so resumed runs reproduce uninterrupted
ones.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"MGCK"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("int64"): 1, np.dtype("uint8"): 2}


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            code = _CODES[arr.dtype]
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(_DTYPES[code]).tobytes())


def read_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} (offset 0)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} (offset 4)")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode()
            off += nlen
            code, ndim = struct.unpack_from("<BB", blob, off)
            off += 2
            if code not in _DTYPES:
                raise FormatError(f"{path}: unknown dtype code {code} (offset {off - 2})")
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(blob):
                raise FormatError(f"{path}: truncated payload for {name} (offset {off})")
            out[name] = np.frombuffer(blob[off:off + nbytes], dt).reshape(shape).copy()
            off += nbytes
    except struct.error:
        raise FormatError(f"{path}: truncated header (offset {off})") from None
    return out


def pack_config(cfg_dict: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(cfg_dict, sort_keys=True).encode(), np.uint8).copy()


def unpack_config(arr: np.ndarray) -> dict:
    return json.loads(bytes(arr.tobytes()).decode())
