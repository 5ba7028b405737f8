"""Cube-grid partition, mixing, shuffling and recovery.

A volume is split into N^3 equal cubes. The location index of the cube at
grid coordinates (jx, jy, jz) is j = (jz*N + jy)*N + jx; all modules share
this linearization. Keep-mode mixing swaps cubes between images at fixed
locations; scramble mode also relocates them. Every grid carries provenance
(origin location + source tag per slot) so recovery is always exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, DimensionError
from .volume import LabelMap, ProbMap, Volume


@dataclass(frozen=True)
class SourceTag:
    labeled: bool
    index: int


UNTAGGED = SourceTag(False, -1)


def loc_to_xyz(j: int, n: int) -> tuple[int, int, int]:
    return j % n, (j // n) % n, j // (n * n)


def xyz_to_loc(jx: int, jy: int, jz: int, n: int) -> int:
    return (jz * n + jy) * n + jx


def _unwrap(v):
    if isinstance(v, Volume):
        return v.data, ("volume", None)
    if isinstance(v, LabelMap):
        return v.data, ("labels", v.num_classes)
    if isinstance(v, ProbMap):
        return v.data, ("probmap", v.kind)
    return np.asarray(v), ("array", None)


def _wrap(arr, meta):
    kind, extra = meta
    if kind == "volume":
        return Volume(arr)
    if kind == "labels":
        return LabelMap(arr, extra)
    if kind == "probmap":
        return ProbMap(arr, extra)
    return arr


@dataclass(frozen=True)
class CubeGrid:
    """N^3 cubes in slot order; locations[s] is slot s's origin location."""

    cubes: np.ndarray            # (N^3, w, h, l) or (N^3, C, w, h, l)
    n_per_axis: int
    locations: np.ndarray        # (N^3,) int64
    sources: tuple[SourceTag, ...]
    meta: tuple = ("array", None)

    def __post_init__(self):
        n = self.n_per_axis
        m = n ** 3
        if self.cubes.shape[0] != m:
            raise DimensionError(f"expected {m} cubes, got {self.cubes.shape[0]}")
        if len(self.locations) != m or len(self.sources) != m:
            raise DimensionError("locations/sources must have one entry per cube")
        if sorted(self.locations.tolist()) != list(range(m)):
            raise ConsistencyError("locations must be a permutation of 0..N^3-1")

    @property
    def cube_dims(self) -> tuple[int, int, int]:
        return self.cubes.shape[-3:]

    @property
    def source_dims(self) -> tuple[int, int, int]:
        w, h, l = self.cube_dims
        n = self.n_per_axis
        return (w * n, h * n, l * n)

    @property
    def has_channels(self) -> bool:
        return self.cubes.ndim == 5


def _split(arr: np.ndarray, n: int) -> np.ndarray:
    """(..spatial..) -> (N^3, ..cube..) stacked in location order."""
    if arr.ndim == 3:
        W, H, L = arr.shape
        if W % n or H % n or L % n:
            raise DimensionError(f"dims {arr.shape} not divisible by n={n}")
        w, h, l = W // n, H // n, L // n
        r = arr.reshape(n, w, n, h, n, l)
        return np.ascontiguousarray(r.transpose(4, 2, 0, 1, 3, 5)).reshape(n ** 3, w, h, l)
    if arr.ndim == 4:
        C, W, H, L = arr.shape
        if W % n or H % n or L % n:
            raise DimensionError(f"dims {arr.shape[1:]} not divisible by n={n}")
        w, h, l = W // n, H // n, L // n
        r = arr.reshape(C, n, w, n, h, n, l)
        return np.ascontiguousarray(r.transpose(5, 3, 1, 0, 2, 4, 6)).reshape(n ** 3, C, w, h, l)
    raise DimensionError(f"cannot partition array with ndim {arr.ndim}")


def _join(cubes: np.ndarray, n: int) -> np.ndarray:
    """Inverse of _split for cubes already in location order."""
    if cubes.ndim == 4:
        m, w, h, l = cubes.shape
        r = cubes.reshape(n, n, n, w, h, l)           # (jz, jy, jx, ...)
        return np.ascontiguousarray(r.transpose(2, 3, 1, 4, 0, 5)).reshape(n * w, n * h, n * l)
    m, C, w, h, l = cubes.shape
    r = cubes.reshape(n, n, n, C, w, h, l)
    return np.ascontiguousarray(r.transpose(3, 2, 4, 1, 5, 0, 6)).reshape(C, n * w, n * h, n * l)


def partition(v, n: int, tag: SourceTag = UNTAGGED) -> CubeGrid:
    """Split into N^3 cubes; slot order equals location order."""
    if n < 1:
        raise DimensionError(f"n must be >= 1, got {n}")
    arr, meta = _unwrap(v)
    cubes = _split(arr, n)
    return CubeGrid(cubes, n, np.arange(n ** 3, dtype=np.int64),
                    tuple([tag] * n ** 3), meta)


def recover(g: CubeGrid):
    """Place every cube back at its origin location; inverse of partition."""
    order = np.argsort(g.locations, kind="stable")
    arr = _join(np.ascontiguousarray(g.cubes[order]), g.n_per_axis)
    return _wrap(arr, g.meta)


def assemble(g: CubeGrid):
    """Render the grid with slot s at location s (the mixed-image layout)."""
    return _wrap(_join(g.cubes, g.n_per_axis), g.meta)


def shuffle_within(g: CubeGrid, rng: np.random.Generator) -> CubeGrid:
    perm = rng.permutation(len(g.locations))
    return CubeGrid(g.cubes[perm], g.n_per_axis, g.locations[perm],
                    tuple(g.sources[i] for i in perm), g.meta)


def unshuffle(g: CubeGrid) -> CubeGrid:
    order = np.argsort(g.locations, kind="stable")
    return CubeGrid(g.cubes[order], g.n_per_axis, g.locations[order],
                    tuple(g.sources[i] for i in order), g.meta)


@dataclass(frozen=True)
class MixMask:
    """Per (destination location d, mixed image m): which source image
    supplies the cube (assignment) and from which origin location (origins).
    Keep-mode masks have origins[d, m] == d."""

    assignment: np.ndarray   # (N^3, B) int64
    origins: np.ndarray      # (N^3, B) int64
    n_per_axis: int

    def __post_init__(self):
        if self.assignment.shape != self.origins.shape:
            raise ConsistencyError("assignment/origins shape mismatch")
        m, b = self.assignment.shape
        if m != self.n_per_axis ** 3:
            raise ConsistencyError(
                f"mask rows {m} != N^3 = {self.n_per_axis ** 3}")
        pairs = {(int(s), int(o))
                 for s, o in zip(self.assignment.ravel(), self.origins.ravel())}
        if len(pairs) != m * b:
            raise ConsistencyError("mask does not partition the source cubes")

    @property
    def n_images(self) -> int:
        return self.assignment.shape[1]


def _labeled_ok(assignment: np.ndarray, labeled: np.ndarray) -> bool:
    if not labeled.any():
        return True
    for m in range(assignment.shape[1]):
        if not labeled[assignment[:, m]].any():
            return False
    return True


def draw_mix_mask(n_images: int, n: int, rng: np.random.Generator,
                  labeled_flags=None, scramble: bool = False) -> MixMask:
    """Random mask over a batch: one source permutation per location, so the
    mixed images partition the source cubes. Scramble mode additionally
    permutes destination locations within each mixed image (origins then
    disagree with destinations). Each mixed image keeps at least one
    labeled-source cube whenever any source is labeled."""
    m = n ** 3
    labeled = (np.zeros(n_images, bool) if labeled_flags is None
               else np.asarray(labeled_flags, bool))
    if labeled.sum() * m < n_images:
        labeled = np.zeros(n_images, bool)  # rule unsatisfiable; waive it
    for _ in range(1000):
        per_loc = np.empty((m, n_images), np.int64)
        for d in range(m):
            per_loc[d] = rng.permutation(n_images)
        if scramble:
            origins = np.empty((m, n_images), np.int64)
            assignment = np.empty((m, n_images), np.int64)
            for col in range(n_images):
                perm = rng.permutation(m)
                origins[:, col] = perm
                assignment[:, col] = per_loc[perm, col]
        else:
            assignment = per_loc
            origins = np.tile(np.arange(m, dtype=np.int64)[:, None], (1, n_images))
        if _labeled_ok(assignment, labeled):
            return MixMask(assignment, origins, n)
    raise ConsistencyError("could not draw a mask satisfying the labeled-cube rule")


def _check_grids(grids: list[CubeGrid]):
    if not grids:
        raise DimensionError("need at least one grid")
    n = grids[0].n_per_axis
    dims = grids[0].cube_dims
    for g in grids[1:]:
        if g.n_per_axis != n or g.cube_dims != dims:
            raise DimensionError("grids disagree on n or cube dims")
    return n


def cross_mix(grids: list[CubeGrid], mask: MixMask | None,
              rng: np.random.Generator | None = None,
              scramble: bool = False) -> tuple[list[CubeGrid], MixMask]:
    """Mix cubes across the batch. Returns one mixed grid per input image;
    mixed grid slots are destination locations, provenance is recorded."""
    n = _check_grids(grids)
    if mask is None:
        if rng is None:
            raise ConsistencyError("cross_mix needs a mask or an rng to draw one")
        labeled = [g.sources[0].labeled for g in grids]
        mask = draw_mix_mask(len(grids), n, rng, labeled, scramble=scramble)
    if mask.n_images != len(grids) or mask.n_per_axis != n:
        raise DimensionError(
            f"mask for {mask.n_images} images / n={mask.n_per_axis}, "
            f"got {len(grids)} grids with n={n}")
    slot_of = [np.argsort(g.locations, kind="stable") for g in grids]
    mixed = []
    for m in range(mask.n_images):
        cubes = np.empty_like(grids[0].cubes)
        locs = np.empty(n ** 3, np.int64)
        tags = []
        for d in range(n ** 3):
            src = int(mask.assignment[d, m])
            origin = int(mask.origins[d, m])
            cubes[d] = grids[src].cubes[slot_of[src][origin]]
            locs[d] = origin
            tags.append(grids[src].sources[slot_of[src][origin]])
        mixed.append(CubeGrid(cubes, n, locs, tuple(tags), grids[0].meta))
    return mixed, mask


def scramble_mix(grids: list[CubeGrid],
                 rng: np.random.Generator) -> tuple[list[CubeGrid], MixMask]:
    """Ablation path: mix while ignoring original locations."""
    return cross_mix(grids, None, rng, scramble=True)


def cross_recover(preds: list, mask: MixMask, n: int) -> list:
    """Reassemble one full prediction per source image from mixed-image
    predictions, routing cube d of mixed image m back to source
    assignment[d, m] at location origins[d, m]."""
    if len(preds) != mask.n_images or n != mask.n_per_axis:
        raise ConsistencyError(
            f"mask expects {mask.n_images} images with n={mask.n_per_axis}, "
            f"got {len(preds)} with n={n}")
    arrs, metas = zip(*[_unwrap(p) for p in preds])
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise ConsistencyError("mixed predictions disagree on shape")
    stacks = [_split(a, n) for a in arrs]
    out = [np.empty_like(s) for s in stacks]
    for m in range(mask.n_images):
        for d in range(n ** 3):
            src = int(mask.assignment[d, m])
            origin = int(mask.origins[d, m])
            out[src][origin] = stacks[m][d]
    return [_wrap(_join(o, n), metas[0]) for o in out]


def cross_recover_adjoint(d_sources: list[np.ndarray], mask: MixMask,
                          n: int) -> list[np.ndarray]:
    """Adjoint of cross_recover: route per-source gradients back to the
    mixed-image layout (used by the trainer's backward pass)."""
    stacks = [_split(np.asarray(d), n) for d in d_sources]
    out = [np.empty_like(s) for s in stacks]
    for m in range(mask.n_images):
        for d in range(n ** 3):
            src = int(mask.assignment[d, m])
            origin = int(mask.origins[d, m])
            out[m][d] = stacks[src][origin]
    return [_join(o, n) for o in out]


# ----- interpolation-style baseline augmenters -----

def draw_box(dims, size, rng: np.random.Generator):
    if any(s > d or s < 1 for s, d in zip(size, dims)):
        raise DimensionError(f"box size {size} does not fit dims {dims}")
    off = tuple(int(rng.integers(0, d - s + 1)) for s, d in zip(size, dims))
    return off, tuple(size)


def baseline_augment(kind: str, a: Volume, b: Volume | None, params: dict,
                     rng: np.random.Generator) -> Volume:
    """cutmix: splice a box from b into a; cutout: zero a box of a;
    mixup: lam*a + (1-lam)*b."""
    if kind == "mixup":
        if b is None or a.dims != b.dims:
            raise DimensionError("mixup needs two volumes of equal dims")
        lam = params.get("lam")
        if lam is None:
            lam = float(rng.random())
        if not 0.0 <= lam <= 1.0:
            raise DimensionError(f"mixup lam must be in [0,1], got {lam}")
        return Volume(lam * a.data + (1.0 - lam) * b.data)
    if kind not in ("cutmix", "cutout"):
        raise DimensionError(f"unknown augmentation kind {kind!r}")
    box = params.get("box")
    if box is None:
        size = params.get("size")
        if size is None:
            size = tuple(max(1, d // 2) for d in a.dims)
        box = draw_box(a.dims, size, rng)
    off, size = box
    if any(o < 0 or o + s > d for o, s, d in zip(off, size, a.dims)):
        raise DimensionError(f"box {box} exceeds dims {a.dims}")
    sl = tuple(slice(o, o + s) for o, s in zip(off, size))
    out = a.data.copy()
    if kind == "cutmix":
        if b is None or a.dims != b.dims:
            raise DimensionError("cutmix needs two volumes of equal dims")
        out[sl] = b.data[sl]
    else:
        out[sl] = 0.0
    return Volume(out)
