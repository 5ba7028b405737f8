"""Procedural abdominal-style phantoms.

Each case places C ellipsoidal organs at canonical relative positions with a
shared global shift, small per-organ shifts and per-axis radius jitter, so
organ locations are stable across cases while sizes vary. A fixed linear
background intensity ramp gives every region of the volume a position
signature (real scans carry global context too); organ intensities are
Gaussian around per-organ means on top of global noise. Ground truth for
unlabeled cases lives in a separate eval-only sidecar so the trainer cannot
touch it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .volume import (LabelMap, Volume, read_raw_labels, read_raw_volume,
                     write_raw_labels, write_raw_volume)


@dataclass(frozen=True)
class OrganSpec:
    class_id: int
    center: tuple[float, float, float]   # relative coords in [0,1]^3
    radius: float                        # voxels
    radius_jitter: float                 # fraction of radius, per axis
    intensity_mean: float
    intensity_std: float


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (24, 24, 24)
    organs: tuple[OrganSpec, ...] = ()
    global_shift_jitter: float = 1.2     # voxels, shared by all organs
    organ_shift_jitter: float = 0.6      # voxels, per organ
    noise_std: float = 0.12
    gradient: tuple[float, float, float] = (0.30, 0.25, 0.35)
    seed: int = 0

    def __post_init__(self):
        if not self.organs:
            raise ConfigError("phantom spec needs at least one organ")
        ids = sorted(o.class_id for o in self.organs)
        if ids != list(range(1, len(self.organs) + 1)):
            raise ConfigError(f"organ class ids must cover 1..C exactly once, got {ids}")
        centers = {o.center for o in self.organs}
        if len(centers) != len(self.organs):
            raise ConfigError("organ canonical centers must be pairwise distinct")
        if self.organ_shift_jitter > 0.1 * min(self.dims):
            raise ConfigError("per-organ shift jitter exceeds 10% of dims")
        for o in self.organs:
            if o.radius <= 0:
                raise ConfigError(f"organ {o.class_id} radius must be positive")
            reach = o.radius * (1 + o.radius_jitter) + self.global_shift_jitter \
                + self.organ_shift_jitter
            for c, d in zip(o.center, self.dims):
                if c * d - reach < 0 or c * d + reach > d:
                    raise ConfigError(
                        f"organ {o.class_id} can leave the volume "
                        f"(center {c:.2f} * {d} with reach {reach:.1f})")

    @property
    def num_classes(self) -> int:
        return len(self.organs)


def default_phantom_spec(seed: int = 0) -> PhantomSpec:
    """24^3, five organs: one big head class, two mids, two small tails.
    The two mids share an intensity, as do the two tails, so telling them
    apart requires the location prior."""
    organs = (
        OrganSpec(1, (0.42, 0.42, 0.45), 7.0, 0.12, 0.75, 0.06),
        OrganSpec(2, (0.70, 0.34, 0.38), 4.0, 0.15, 0.55, 0.06),
        OrganSpec(3, (0.32, 0.72, 0.52), 3.0, 0.15, 0.55, 0.06),
        OrganSpec(4, (0.68, 0.66, 0.62), 2.0, 0.20, 0.62, 0.06),
        OrganSpec(5, (0.48, 0.56, 0.74), 2.0, 0.20, 0.62, 0.06),
    )
    return PhantomSpec(organs=organs, seed=seed)


def generate_case(spec: PhantomSpec, rng: np.random.Generator) -> tuple[Volume, LabelMap]:
    """Rasterize one case. Earlier-listed organs win voxel overlaps."""
    W, H, L = spec.dims
    coords = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5,
                         np.arange(L) + 0.5, indexing="ij")
    labels = np.zeros(spec.dims, np.uint8)
    intensity = np.zeros(spec.dims, np.float32)
    for g, ax, d in zip(spec.gradient, coords, spec.dims):
        intensity += np.float32(g) * (ax.astype(np.float32) / d - 0.5)
    gshift = rng.uniform(-spec.global_shift_jitter, spec.global_shift_jitter, 3)
    for organ in spec.organs:
        oshift = rng.uniform(-spec.organ_shift_jitter, spec.organ_shift_jitter, 3)
        center = [c * d + gs + os for c, d, gs, os
                  in zip(organ.center, spec.dims, gshift, oshift)]
        radii = organ.radius * (1.0 + rng.uniform(-organ.radius_jitter,
                                                  organ.radius_jitter, 3))
        quad = sum(((ax - c) / r) ** 2 for ax, c, r in zip(coords, center, radii))
        mask = (quad <= 1.0) & (labels == 0)
        labels[mask] = organ.class_id
        intensity[mask] += rng.normal(organ.intensity_mean, organ.intensity_std,
                                      int(mask.sum())).astype(np.float32)
    intensity += rng.normal(0.0, spec.noise_std, spec.dims).astype(np.float32)
    return Volume(intensity), LabelMap(labels, spec.num_classes)


@dataclass
class Dataset:
    spec: PhantomSpec
    labeled: list            # [(Volume, LabelMap)]
    unlabeled: list          # [Volume]
    labeled_ids: list[int]
    unlabeled_ids: list[int]
    labeled_fraction: float
    seed: int
    eval_truth: dict = field(default_factory=dict)  # case id -> LabelMap, eval only

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes


def make_dataset(spec: PhantomSpec, n_cases: int, labeled_fraction: float,
                 rng: np.random.Generator) -> Dataset:
    """Generate n_cases and randomly designate ceil(fraction * n) as labeled.
    Unlabeled ground truth goes only into the eval_truth sidecar."""
    if n_cases < 1:
        raise ConfigError(f"n_cases must be >= 1, got {n_cases}")
    if not 0.0 < labeled_fraction <= 1.0:
        raise ConfigError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    n_labeled = int(np.ceil(labeled_fraction * n_cases))
    labeled_ids = sorted(rng.choice(n_cases, size=n_labeled, replace=False).tolist())
    case_seeds = rng.integers(0, 2 ** 62, size=n_cases)
    ds = Dataset(spec, [], [], labeled_ids,
                 [i for i in range(n_cases) if i not in set(labeled_ids)],
                 labeled_fraction, spec.seed)
    for i in range(n_cases):
        vol, lab = generate_case(spec, np.random.default_rng(int(case_seeds[i])))
        if i in set(labeled_ids):
            ds.labeled.append((vol, lab))
        else:
            ds.unlabeled.append(vol)
            ds.eval_truth[i] = lab
    return ds


def class_frequency_profile(ds: Dataset) -> np.ndarray:
    """Voxel counts per organ class over the labeled ground truth."""
    if not ds.labeled:
        raise ConfigError("dataset has no labeled cases")
    counts = np.zeros(ds.num_classes, np.int64)
    for _, lab in ds.labeled:
        counts += np.bincount(lab.data.ravel(), minlength=ds.num_classes + 1)[1:]
    return counts


# ----- on-disk layout -----

def _spec_to_json(spec: PhantomSpec) -> dict:
    d = asdict(spec)
    d["organs"] = [asdict(o) for o in spec.organs]
    return d


def _spec_from_json(d: dict) -> PhantomSpec:
    organs = tuple(OrganSpec(**{**o, "center": tuple(o["center"])})
                   for o in d["organs"])
    return PhantomSpec(dims=tuple(d["dims"]), organs=organs,
                       global_shift_jitter=d["global_shift_jitter"],
                       organ_shift_jitter=d["organ_shift_jitter"],
                       noise_std=d["noise_std"], gradient=tuple(d["gradient"]),
                       seed=d["seed"])


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    (root / "cases").mkdir(parents=True, exist_ok=True)
    (root / "eval_truth").mkdir(exist_ok=True)
    li = iter(ds.labeled)
    ui = iter(ds.unlabeled)
    labeled_set = set(ds.labeled_ids)
    n = len(ds.labeled_ids) + len(ds.unlabeled_ids)
    for i in range(n):
        if i in labeled_set:
            vol, lab = next(li)
            write_raw_volume(vol, root / "cases" / f"case_{i:04d}.vol.mgv")
            write_raw_labels(lab, root / "cases" / f"case_{i:04d}.lab.mgv")
        else:
            vol = next(ui)
            write_raw_volume(vol, root / "cases" / f"case_{i:04d}.vol.mgv")
            write_raw_labels(ds.eval_truth[i],
                             root / "eval_truth" / f"case_{i:04d}.lab.mgv")
    manifest = {
        "format": "cubeseg-dataset", "version": 1, "n_cases": n,
        "seed": ds.seed, "labeled_fraction": ds.labeled_fraction,
        "labeled_ids": ds.labeled_ids, "unlabeled_ids": ds.unlabeled_ids,
        "num_classes": ds.num_classes, "dims": list(ds.spec.dims),
        "spec": _spec_to_json(ds.spec),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(root, with_truth: bool = False) -> Dataset:
    """Read a dataset directory; eval_truth is loaded only on request."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != "cubeseg-dataset":
        raise ConfigError(f"{root}: not a dataset directory")
    spec = _spec_from_json(manifest["spec"])
    ds = Dataset(spec, [], [], manifest["labeled_ids"], manifest["unlabeled_ids"],
                 manifest["labeled_fraction"], manifest["seed"])
    for i in ds.labeled_ids:
        vol = read_raw_volume(root / "cases" / f"case_{i:04d}.vol.mgv")
        lab = read_raw_labels(root / "cases" / f"case_{i:04d}.lab.mgv")
        ds.labeled.append((vol, lab))
    for i in ds.unlabeled_ids:
        ds.unlabeled.append(read_raw_volume(root / "cases" / f"case_{i:04d}.vol.mgv"))
        if with_truth:
            ds.eval_truth[i] = read_raw_labels(
                root / "eval_truth" / f"case_{i:04d}.lab.mgv")
    return ds


def labeled_cases(ds: Dataset) -> list:
    """(case_id, Volume, LabelMap) triples for evaluation-style consumers."""
    return [(i, vol, lab) for i, (vol, lab) in zip(ds.labeled_ids, ds.labeled)]
