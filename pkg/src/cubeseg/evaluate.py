"""Sliding-window inference and overlap/surface metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import cubes, ops
from .errors import ConfigError, DimensionError
from .model import NetworkParams, cls_forward, net_forward
from .volume import LabelMap, ProbMap, Volume, normalize, softmax_channels_array


@dataclass(frozen=True)
class EvalConfig:
    window: tuple[int, int, int] = (24, 24, 24)
    stride: tuple[int, int, int] = (8, 8, 8)
    tau: float = 1.0            # NSD tolerance in voxels (Euclidean)
    batch_windows: int = 16


def _starts(dim: int, win: int, stride: int) -> list[int]:
    s = list(range(0, dim - win + 1, stride))
    if s[-1] != dim - win:
        s.append(dim - win)  # clamp the last window to the boundary
    return s


def sliding_window_infer(params: NetworkParams, v: Volume,
                         window=(24, 24, 24), stride=(8, 8, 8),
                         batch_windows: int = 16) -> ProbMap:
    """Average softmax probabilities over all windows covering each voxel."""
    dims = v.dims
    if any(w > d for w, d in zip(window, dims)):
        raise DimensionError(f"window {window} exceeds dims {dims}")
    if any(s < 1 for s in stride):
        raise DimensionError(f"stride must be >= 1, got {stride}")
    offsets = [(x, y, z)
               for x in _starts(dims[0], window[0], stride[0])
               for y in _starts(dims[1], window[1], stride[1])
               for z in _starts(dims[2], window[2], stride[2])]
    cch = params.config.out_channels
    acc = np.zeros((cch,) + dims, np.float64)
    cover = np.zeros(dims, np.float64)
    for i in range(0, len(offsets), batch_windows):
        chunk = offsets[i:i + batch_windows]
        x = np.stack([v.data[ox:ox + window[0], oy:oy + window[1], oz:oz + window[2]]
                      for ox, oy, oz in chunk])[:, None]
        logits, _, _ = net_forward(params.config, params.tensors, x)
        probs = softmax_channels_array(logits, axis=1)
        for (ox, oy, oz), p in zip(chunk, probs):
            acc[:, ox:ox + window[0], oy:oy + window[1], oz:oz + window[2]] += p
            cover[ox:ox + window[0], oy:oy + window[1], oz:oz + window[2]] += 1.0
    return ProbMap((acc / cover).astype(np.float32), "probabilities")


def dsc(pred: LabelMap, gt: LabelMap, c: int) -> float:
    """2|A n B| / (|A| + |B|); 1.0 if both empty, 0.0 if exactly one is."""
    if pred.dims != gt.dims:
        raise DimensionError(f"dims differ: {pred.dims} vs {gt.dims}")
    a = pred.data == c
    b = gt.data == c
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with a 6-neighbor outside the mask; the volume border
    counts as outside."""
    interior = mask.copy()
    for axis in range(3):
        lo = np.roll(mask, 1, axis=axis)
        hi = np.roll(mask, -1, axis=axis)
        # roll wraps; border voxels must see background beyond the edge
        lo_idx = [slice(None)] * 3
        lo_idx[axis] = 0
        hi_idx = [slice(None)] * 3
        hi_idx[axis] = -1
        lo[tuple(lo_idx)] = False
        hi[tuple(hi_idx)] = False
        interior &= lo & hi
    return mask & ~interior


def nsd(pred: LabelMap, gt: LabelMap, c: int, tau: float = 1.0) -> float:
    """Symmetric fraction of surface voxels within Euclidean distance tau of
    the other surface; 1.0 if both masks empty, 0.0 if exactly one is."""
    if pred.dims != gt.dims:
        raise DimensionError(f"dims differ: {pred.dims} vs {gt.dims}")
    if tau < 0:
        raise DimensionError(f"tau must be >= 0, got {tau}")
    a = pred.data == c
    b = gt.data == c
    if not a.any() and not b.any():
        return 1.0
    if not a.any() or not b.any():
        return 0.0
    sa = surface_voxels(a)
    sb = surface_voxels(b)
    dist_to_b = ndimage.distance_transform_edt(~sb)
    dist_to_a = ndimage.distance_transform_edt(~sa)
    eps = 1e-9
    near_ab = int((dist_to_b[sa] <= tau + eps).sum())
    near_ba = int((dist_to_a[sb] <= tau + eps).sum())
    return (near_ab + near_ba) / (int(sa.sum()) + int(sb.sum()))


@dataclass
class MetricsTable:
    classes: list[int]
    case_ids: list[int]
    case_dsc: np.ndarray       # (n_cases, C) percent
    case_nsd: np.ndarray       # (n_cases, C) percent
    meta: dict = field(default_factory=dict)

    @property
    def dsc_mean(self) -> np.ndarray:
        return self.case_dsc.mean(axis=0)

    @property
    def dsc_std(self) -> np.ndarray:
        return self.case_dsc.std(axis=0)

    @property
    def nsd_mean(self) -> np.ndarray:
        return self.case_nsd.mean(axis=0)

    @property
    def avg_dsc(self) -> float:
        return float(self.dsc_mean.mean())

    @property
    def avg_nsd(self) -> float:
        return float(self.nsd_mean.mean())


def predict_labels(params: NetworkParams, v: Volume, cfg: EvalConfig) -> LabelMap:
    probs = sliding_window_infer(params, normalize(v), cfg.window, cfg.stride,
                                 cfg.batch_windows)
    return LabelMap(probs.data.argmax(axis=0).astype(np.uint8),
                    params.config.num_classes)


def evaluate(params: NetworkParams, cases: list, cfg: EvalConfig,
             meta: dict | None = None) -> MetricsTable:
    """cases: (case_id, Volume, LabelMap) triples with ground truth."""
    if not cases:
        raise ConfigError("evaluate needs at least one case")
    C = params.config.num_classes
    ids, d_rows, n_rows = [], [], []
    for cid, vol, gt in cases:
        pred = predict_labels(params, vol, cfg)
        d_rows.append([100.0 * dsc(pred, gt, c) for c in range(1, C + 1)])
        n_rows.append([100.0 * nsd(pred, gt, c, cfg.tau) for c in range(1, C + 1)])
        ids.append(cid)
    return MetricsTable(list(range(1, C + 1)), ids, np.asarray(d_rows),
                        np.asarray(n_rows), meta or {})


def location_accuracy(params: NetworkParams, cases: list, n: int) -> float:
    """Fraction of cubes whose location-head argmax is their true location."""
    hits = total = 0
    for _, vol, _ in cases:
        grid = cubes.partition(normalize(vol), n)
        x = grid.cubes[:, None]
        _, feats, _ = net_forward(params.config, params.tensors, x)
        logits, _ = cls_forward(params.config, params.tensors, feats)
        hits += int((logits.argmax(axis=1) == grid.locations).sum())
        total += len(grid.locations)
    return hits / total


def table_to_csv(table: MetricsTable, path) -> None:
    """Summary layout: one column per organ (mean and std), then averages."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric"] + [f"class_{c}" for c in table.classes]
                   + ["avg_dsc", "avg_nsd"])
        w.writerow(["dsc_mean"] + [f"{v:.4f}" for v in table.dsc_mean]
                   + [f"{table.avg_dsc:.4f}", ""])
        w.writerow(["dsc_std"] + [f"{v:.4f}" for v in table.dsc_std] + ["", ""])
        w.writerow(["nsd_mean"] + [f"{v:.4f}" for v in table.nsd_mean]
                   + ["", f"{table.avg_nsd:.4f}"])


def emit_plot_data(tables: list[MetricsTable], path,
                   features: np.ndarray | None = None,
                   feature_path=None) -> None:
    """Per-(case, class) rows for box plots; optional feature-vector dump for
    external density estimation."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["table", "case", "class", "dsc", "nsd"])
        for ti, t in enumerate(tables):
            tag = t.meta.get("tag", ti)
            for r, cid in enumerate(t.case_ids):
                for ci, c in enumerate(t.classes):
                    w.writerow([tag, cid, c, f"{t.case_dsc[r, ci]:.6f}",
                                f"{t.case_nsd[r, ci]:.6f}"])
    if features is not None and feature_path is not None:
        with open(feature_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["case", "labeled"] +
                       [f"f{i}" for i in range(features.shape[1] - 2)])
            for row in features:
                w.writerow([int(row[0]), int(row[1])] +
                           [f"{v:.6f}" for v in row[2:]])


def dump_features(params: NetworkParams, items: list) -> np.ndarray:
    """(case_id, labeled_flag, pooled bottleneck features) per volume;
    items are (case_id, Volume, labeled_flag)."""
    rows = []
    for cid, vol, labeled in items:
        _, feats, _ = net_forward(params.config, params.tensors,
                                  normalize(vol).data[None, None])
        rows.append(np.concatenate([[cid, int(labeled)], ops.gap_fwd(feats)[0]]))
    return np.asarray(rows)
