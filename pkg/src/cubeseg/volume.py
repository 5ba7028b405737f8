"""Dense 3D grid types and their basic operations.

Arrays are indexed [x, y, z] with dims (W, H, L). Probability/logit maps are
channel-major with shape (C+1, W, H, L); channel 0 is background. All
reductions accumulate in float64; storage is float32 (uint8 for labels).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, NumericError

MAGIC = b"MGV1"
KIND_REAL32 = 1
KIND_LABEL8 = 2
HEADER_SIZE = 24
MAX_VOXELS = 1 << 31


@dataclass(frozen=True)
class Volume:
    """Scalar intensity grid, float32, shape (W, H, L)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3 or min(d.shape) < 1:
            raise DimensionError(f"volume needs 3 positive dims, got shape {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelMap:
    """Class-index grid, values in {0,..,num_classes}, 0 is background."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.uint8)
        if d.ndim != 3 or min(d.shape) < 1:
            raise DimensionError(f"label map needs 3 positive dims, got shape {d.shape}")
        if self.num_classes < 1:
            raise DimensionError(f"num_classes must be >= 1, got {self.num_classes}")
        if d.max(initial=0) > self.num_classes:
            raise DimensionError(
                f"label {int(d.max())} exceeds num_classes {self.num_classes}")
        object.__setattr__(self, "data", d)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class ProbMap:
    """Channel-major (C+1, W, H, L) map of logits or probabilities."""

    data: np.ndarray
    kind: str  # "logits" or "probabilities"

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 4 or min(d.shape) < 1:
            raise DimensionError(f"prob map needs shape (C+1, W, H, L), got {d.shape}")
        if self.kind not in ("logits", "probabilities"):
            raise DimensionError(f"kind must be logits|probabilities, got {self.kind!r}")
        object.__setattr__(self, "data", d)

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


def normalize(v: Volume) -> Volume:
    """Shift/scale to zero mean, unit variance; constant input maps to zeros."""
    x = v.data
    mean = x.mean(dtype=np.float64)
    std = x.std(dtype=np.float64)
    if std == 0.0:
        return Volume(np.zeros_like(x))
    return Volume(((x - mean) / std).astype(np.float32))


def random_crop(v: Volume, y: LabelMap | None, size: tuple[int, int, int],
                rng: np.random.Generator) -> tuple[Volume, LabelMap | None]:
    """Crop a uniformly-placed size block; the same offsets apply to v and y."""
    dims = v.dims
    if y is not None and y.dims != dims:
        raise DimensionError(f"volume dims {dims} != label dims {y.dims}")
    if any(s > d for s, d in zip(size, dims)):
        raise DimensionError(f"crop size {size} exceeds dims {dims}")
    off = tuple(int(rng.integers(0, d - s + 1)) for s, d in zip(size, dims))
    sl = tuple(slice(o, o + s) for o, s in zip(off, size))
    vc = Volume(v.data[sl].copy())
    yc = LabelMap(y.data[sl].copy(), y.num_classes) if y is not None else None
    return vc, yc


def softmax_channels(p: ProbMap) -> ProbMap:
    """Per-voxel softmax over channel 0, max-subtracted for stability."""
    if p.kind != "logits":
        raise DimensionError(f"softmax expects logits, got {p.kind}")
    x = p.data
    if not np.isfinite(x).all():
        raise NumericError("softmax input contains non-finite logits")
    return ProbMap(softmax_channels_array(x), "probabilities")


def softmax_channels_array(x: np.ndarray, axis: int = 0) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)


def _read_header(blob: bytes, path) -> tuple[int, int, tuple[int, int, int]]:
    if len(blob) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header, {len(blob)} < {HEADER_SIZE} bytes (offset 0)")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} (offset 0)")
    kind, nclass, w, h, l = struct.unpack_from("<5I", blob, 4)
    if kind not in (KIND_REAL32, KIND_LABEL8):
        raise FormatError(f"{path}: unknown element kind {kind} (offset 4)")
    if min(w, h, l) < 1 or w * h * l > MAX_VOXELS:
        raise FormatError(f"{path}: invalid dims ({w},{h},{l}) (offset 12)")
    return kind, nclass, (w, h, l)


def _payload(blob: bytes, dims, dtype, path) -> np.ndarray:
    n = dims[0] * dims[1] * dims[2]
    need = HEADER_SIZE + n * dtype.itemsize
    if len(blob) != need:
        raise FormatError(
            f"{path}: payload is {len(blob) - HEADER_SIZE} bytes, expected "
            f"{need - HEADER_SIZE} (offset {min(len(blob), need)})")
    flat = np.frombuffer(blob, dtype=dtype, offset=HEADER_SIZE)
    # payload is x-fastest; numpy order='F' over (W, H, L) matches
    return np.ascontiguousarray(flat.reshape(dims, order="F"))


def read_raw_volume(path) -> Volume:
    with open(path, "rb") as f:
        blob = f.read()
    kind, _, dims = _read_header(blob, path)
    if kind != KIND_REAL32:
        raise FormatError(f"{path}: expected real32 volume, found kind {kind} (offset 4)")
    return Volume(_payload(blob, dims, np.dtype("<f4"), path))


def write_raw_volume(v: Volume, path) -> None:
    w, h, l = v.dims
    header = MAGIC + struct.pack("<5I", KIND_REAL32, 0, w, h, l)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes(order="F"))


def read_raw_labels(path) -> LabelMap:
    with open(path, "rb") as f:
        blob = f.read()
    kind, nclass, dims = _read_header(blob, path)
    if kind != KIND_LABEL8:
        raise FormatError(f"{path}: expected uint8 labels, found kind {kind} (offset 4)")
    if nclass < 1:
        raise FormatError(f"{path}: label file must carry class count >= 1 (offset 8)")
    return LabelMap(_payload(blob, dims, np.dtype("u1"), path), nclass)


def write_raw_labels(y: LabelMap, path) -> None:
    w, h, l = y.dims
    header = MAGIC + struct.pack("<5I", KIND_LABEL8, y.num_classes, w, h, l)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(y.data, dtype="u1").tobytes(order="F"))
