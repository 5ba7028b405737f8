"""Distribution-aware pseudo-label blending.

A running histogram of organ voxel counts over recent pseudo-labels drives a
per-voxel weight: voxels the teacher assigns to frequent (head) classes get
weight near 1 and are handed over to the cube-wise prediction, which is
better at local attributes; background and rare-class voxels keep the
teacher's word. Blending is a per-voxel convex combination of the two
probability maps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, DimensionError
from .model import NetworkParams, net_forward
from .volume import LabelMap, ProbMap, softmax_channels_array


@dataclass(frozen=True)
class ClassHistogram:
    """Ring buffer of per-update organ voxel counts; counts is their sum."""

    num_classes: int
    capacity: int
    window: tuple = ()

    def __post_init__(self):
        if self.num_classes < 1 or self.capacity < 1:
            raise ConsistencyError("histogram needs num_classes >= 1, capacity >= 1")
        for entry in self.window:
            if entry.shape != (self.num_classes,):
                raise ConsistencyError("window entry has wrong length")

    @property
    def counts(self) -> np.ndarray:
        if not self.window:
            return np.zeros(self.num_classes, np.int64)
        return np.sum(self.window, axis=0, dtype=np.int64)


@dataclass(frozen=True)
class WeightMap:
    data: np.ndarray  # (W, H, L) float32 in [0, 1]

    def __post_init__(self):
        d = np.asarray(self.data, np.float32)
        if d.min(initial=0.0) < 0.0 or d.max(initial=0.0) > 1.0:
            raise ConsistencyError("weights must lie in [0, 1]")
        object.__setattr__(self, "data", d)


def count_organ_voxels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.bincount(labels.ravel(), minlength=num_classes + 1)[1:].astype(np.int64)


def update_histogram(h: ClassHistogram, pseudo: LabelMap) -> ClassHistogram:
    """Push this map's organ counts, evicting the oldest beyond capacity."""
    if pseudo.num_classes != h.num_classes:
        raise ConsistencyError(
            f"histogram holds {h.num_classes} classes, map has {pseudo.num_classes}")
    entry = count_organ_voxels(pseudo.data, h.num_classes)
    window = (h.window + (entry,))[-h.capacity:]
    return ClassHistogram(h.num_classes, h.capacity, window)


def weight_lut(counts: np.ndarray, background_weight: float = 0.0) -> np.ndarray:
    """Per-label blending weight: organ c gets counts[c-1]/max(counts);
    background gets background_weight; all zeros before any organ appears."""
    counts = np.asarray(counts, np.float64)
    lut = np.zeros(len(counts) + 1, np.float32)
    mx = counts.max(initial=0.0)
    if mx > 0:
        lut[1:] = (counts / mx).astype(np.float32)
        lut[0] = background_weight
    return lut


def weight_map(pseudo: LabelMap, h: ClassHistogram,
               background_weight: float = 0.0) -> WeightMap:
    lut = weight_lut(h.counts, background_weight)
    return WeightMap(lut[pseudo.data])


def blend_arrays(p_teacher: np.ndarray, p_in: np.ndarray,
                 w: np.ndarray) -> np.ndarray:
    """(1 - w) * p_teacher + w * p_in with w replicated over the channel
    axis. Maps are (C+1, W, H, L) with w (W, H, L), or batched
    (B, C+1, W, H, L) with w (B, W, H, L)."""
    if p_teacher.shape != p_in.shape:
        raise DimensionError(f"map shapes differ: {p_teacher.shape} vs {p_in.shape}")
    if w.shape != p_teacher.shape[:-4] + p_teacher.shape[-3:]:
        raise DimensionError(
            f"weight shape {w.shape} does not match maps {p_teacher.shape}")
    wb = np.expand_dims(w, axis=-4)
    return (1.0 - wb) * p_teacher + wb * p_in


def blend(p_teacher: ProbMap, p_in: ProbMap, w: WeightMap) -> ProbMap:
    if p_teacher.kind != "probabilities" or p_in.kind != "probabilities":
        raise DimensionError("blend expects probability maps")
    if p_teacher.dims != p_in.dims or p_teacher.dims != w.data.shape:
        raise DimensionError(
            f"dims differ: {p_teacher.dims}, {p_in.dims}, {w.data.shape}")
    out = blend_arrays(p_teacher.data, p_in.data, w.data)
    return ProbMap(out.astype(np.float32), "probabilities")


def refined_label(p_blend: ProbMap) -> LabelMap:
    """Per-voxel argmax; ties resolve to the smallest class index."""
    if p_blend.kind != "probabilities":
        raise DimensionError("refined_label expects a probability map")
    lab = p_blend.data.argmax(axis=0).astype(np.uint8)
    return LabelMap(lab, p_blend.num_channels - 1)


def teacher_pseudo(params_t: NetworkParams, v) -> tuple[ProbMap, LabelMap]:
    """Teacher forward + softmax; the argmax is the raw pseudo-label."""
    x = v.data[None, None] if hasattr(v, "data") else np.asarray(v)[None, None]
    logits, _, _ = net_forward(params_t.config, params_t.tensors, x)
    probs = softmax_channels_array(logits[0])
    pm = ProbMap(probs, "probabilities")
    return pm, refined_label(pm)
