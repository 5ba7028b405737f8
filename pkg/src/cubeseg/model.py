"""Small 3D encoder-decoder segmentation net with a cube-location head.

The net is a plain U-shape: `depth` pool/upsample levels, two 3x3x3 convs per
level with instance norm and leaky relu, concat skips, a 1x1x1 classifier.
A two-layer FC head on the pooled bottleneck features predicts which of the
N^3 grid locations a cube came from. Forward/backward are hand-wired; all
tensors are float32 dicts so the EMA teacher and checkpoints stay trivial.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ConfigError, ConsistencyError, DimensionError
from .volume import ProbMap, Volume


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int          # organ classes, background excluded
    n_locations: int          # N^3, width of the location head
    in_channels: int = 1
    base_width: int = 4
    depth: int = 2
    cls_hidden: int = 64

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.base_width < 1 or self.in_channels < 1 or self.cls_hidden < 1:
            raise ConfigError("channel widths must be positive")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.n_locations < 1:
            raise ConfigError(f"n_locations must be >= 1, got {self.n_locations}")

    @property
    def out_channels(self) -> int:
        return self.num_classes + 1

    @property
    def feat_channels(self) -> int:
        return self.base_width << self.depth

    def level_width(self, i: int) -> int:
        return self.base_width << i


@dataclass
class NetworkParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


@dataclass(frozen=True)
class FeatureBlock:
    """Bottleneck features of one input, shape (D_feat, d, h, w)."""

    data: np.ndarray


def _conv_keys(name):
    return f"{name}.w", f"{name}.b", f"{name}.g", f"{name}.bt"


def _init_conv(t, name, ci, co, rng):
    bound = np.sqrt(6.0 / (ci * 27))
    kw, kb, kg, kbt = _conv_keys(name)
    t[kw] = rng.uniform(-bound, bound, size=(co, ci, 3, 3, 3)).astype(np.float32)
    t[kb] = np.zeros(co, np.float32)
    t[kg] = np.ones(co, np.float32)
    t[kbt] = np.zeros(co, np.float32)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> NetworkParams:
    """Fan-in scaled uniform init; same seed gives bit-identical tensors."""
    t: dict[str, np.ndarray] = {}
    for i in range(cfg.depth + 1):
        ci = cfg.in_channels if i == 0 else cfg.level_width(i - 1)
        co = cfg.level_width(i)
        _init_conv(t, f"enc{i}a", ci, co, rng)
        _init_conv(t, f"enc{i}b", co, co, rng)
    for i in range(cfg.depth - 1, -1, -1):
        co = cfg.level_width(i)
        _init_conv(t, f"dec{i}a", 3 * co, co, rng)
        _init_conv(t, f"dec{i}b", co, co, rng)
    t["head.w"] = rng.uniform(
        -np.sqrt(6.0 / cfg.base_width), np.sqrt(6.0 / cfg.base_width),
        size=(cfg.out_channels, cfg.base_width)).astype(np.float32)
    t["head.b"] = np.zeros(cfg.out_channels, np.float32)
    fin = cfg.feat_channels
    t["cls1.w"] = rng.uniform(-np.sqrt(6.0 / fin), np.sqrt(6.0 / fin),
                              size=(cfg.cls_hidden, fin)).astype(np.float32)
    t["cls1.b"] = np.zeros(cfg.cls_hidden, np.float32)
    t["cls2.w"] = rng.uniform(-np.sqrt(6.0 / cfg.cls_hidden), np.sqrt(6.0 / cfg.cls_hidden),
                              size=(cfg.n_locations, cfg.cls_hidden)).astype(np.float32)
    t["cls2.b"] = np.zeros(cfg.n_locations, np.float32)
    return NetworkParams(cfg, t)


def _block_fwd(t, name, x, need_cache):
    kwa, kba, kga, kbta = _conv_keys(name + "a")
    kwb, kbb, kgb, kbtb = _conv_keys(name + "b")
    a = ops.conv3_fwd(x, t[kwa], t[kba])
    r1, c1 = ops.norm_act_fwd(a, t[kga], t[kbta])
    del a
    bv = ops.conv3_fwd(r1, t[kwb], t[kbb])
    r2, c2 = ops.norm_act_fwd(bv, t[kgb], t[kbtb])
    cache = (x, c1, r1, c2, r2) if need_cache else None
    return r2, cache


def _block_bwd(t, name, dy, cache, grads, need_dx=True):
    x, c1, r1, c2, r2 = cache
    kwa, kba, kga, kbta = _conv_keys(name + "a")
    kwb, kbb, kgb, kbtb = _conv_keys(name + "b")
    dbv, dg2, dbt2 = ops.norm_act_bwd(dy, r2, c2, t[kgb])
    _acc(grads, kgb, dg2)
    _acc(grads, kbtb, dbt2)
    dwb, dbb = ops.conv3_bwd_w(dbv, r1)
    _acc(grads, kwb, dwb)
    _acc(grads, kbb, dbb)
    dr1 = ops.conv3_bwd_x(dbv, t[kwb])
    da, dg1, dbt1 = ops.norm_act_bwd(dr1, r1, c1, t[kga])
    _acc(grads, kga, dg1)
    _acc(grads, kbta, dbt1)
    dwa, dba = ops.conv3_bwd_w(da, x)
    _acc(grads, kwa, dwa)
    _acc(grads, kba, dba)
    return ops.conv3_bwd_x(da, t[kwa]) if need_dx else None


def _acc(grads, key, val):
    if key in grads:
        grads[key] += val
    else:
        grads[key] = val


def net_forward(cfg: ModelConfig, t: dict, x: np.ndarray, need_cache: bool = False):
    """Batched forward. Returns (logits, bottleneck feats, cache)."""
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected (B,{cfg.in_channels},D,H,W), got {x.shape}")
    step = 1 << cfg.depth
    if any(s % step for s in x.shape[2:]):
        raise DimensionError(f"spatial dims {x.shape[2:]} not divisible by {step}")
    skips = []
    enc_caches = []
    h = x
    for i in range(cfg.depth + 1):
        if i > 0:
            h = ops.avgpool2_fwd(h)
        h, c = _block_fwd(t, f"enc{i}", h, need_cache)
        enc_caches.append(c)
        if i < cfg.depth:
            skips.append(h)
    feats = h
    dec_caches = []
    for i in range(cfg.depth - 1, -1, -1):
        u = ops.upsample2_fwd(h)
        h = np.concatenate([u, skips[i]], axis=1)
        h, c = _block_fwd(t, f"dec{i}", h, need_cache)
        dec_caches.append(c)
    logits = ops.conv1_fwd(h, t["head.w"], t["head.b"])
    cache = (enc_caches, dec_caches, h) if need_cache else None
    return logits, feats, cache


def net_backward(cfg: ModelConfig, t: dict, cache, dlogits=None, dfeats=None):
    """Accumulate parameter grads; dlogits drives the decoder path, dfeats
    (from the location head) joins at the bottleneck. Either may be None."""
    enc_caches, dec_caches, head_in = cache
    grads: dict[str, np.ndarray] = {}
    dskips = [None] * cfg.depth
    dbottleneck = None
    if dlogits is not None:
        dh, dwh, dbh = ops.conv1_bwd(dlogits, head_in, t["head.w"])
        _acc(grads, "head.w", dwh)
        _acc(grads, "head.b", dbh)
        for i in range(cfg.depth):
            # dec0 ran last in forward, so it is first in backward;
            # dec_caches were appended for i = depth-1 .. 0
            c = dec_caches[cfg.depth - 1 - i]
            dcat = _block_bwd(t, f"dec{i}", dh, c, grads)
            up_ch = cfg.level_width(i + 1)
            du = dcat[:, :up_ch]
            dskips[i] = dcat[:, up_ch:]
            dh = ops.upsample2_bwd(du)
        dbottleneck = dh
    if dfeats is not None:
        dbottleneck = dfeats if dbottleneck is None else dbottleneck + dfeats
    if dbottleneck is None:
        raise ConsistencyError("net_backward needs dlogits and/or dfeats")
    dcur = dbottleneck
    for i in range(cfg.depth, -1, -1):
        if i < cfg.depth and dskips[i] is not None:
            dcur = dcur + dskips[i]
        # the gradient w.r.t. the network input is never consumed
        dx = _block_bwd(t, f"enc{i}", dcur, enc_caches[i], grads, need_dx=i > 0)
        if i > 0:
            dcur = ops.avgpool2_bwd(dx)
    return grads


def cls_forward(cfg: ModelConfig, t: dict, feats: np.ndarray, need_cache: bool = False):
    """Location logits (B, N^3) from bottleneck features (B, Df, d, h, w)."""
    if feats.shape[1] != cfg.feat_channels:
        raise DimensionError(
            f"feature dim {feats.shape[1]} != head input {cfg.feat_channels}")
    z = ops.gap_fwd(feats)
    h1 = ops.fc_fwd(z, t["cls1.w"], t["cls1.b"])
    r1, m1 = ops.lrelu_fwd(h1)
    out = ops.fc_fwd(r1, t["cls2.w"], t["cls2.b"])
    cache = (feats.shape[2:], z, m1, r1) if need_cache else None
    return out, cache


def cls_backward(cfg: ModelConfig, t: dict, dout, cache):
    spatial, z, m1, r1 = cache
    grads: dict[str, np.ndarray] = {}
    dr1, dw2, db2 = ops.fc_bwd(dout, r1, t["cls2.w"])
    grads["cls2.w"] = dw2
    grads["cls2.b"] = db2
    dh1 = ops.lrelu_bwd(dr1, m1)
    dz, dw1, db1 = ops.fc_bwd(dh1, z, t["cls1.w"])
    grads["cls1.w"] = dw1
    grads["cls1.b"] = db1
    return ops.gap_bwd(dz, spatial), grads


def forward_seg(params: NetworkParams, v: Volume) -> tuple[ProbMap, FeatureBlock]:
    x = v.data[None, None]
    logits, feats, _ = net_forward(params.config, params.tensors, x)
    return ProbMap(logits[0], "logits"), FeatureBlock(feats[0])


def classify_location(params: NetworkParams, f: FeatureBlock) -> np.ndarray:
    out, _ = cls_forward(params.config, params.tensors, f.data[None])
    return out[0]


def ema_update(teacher: NetworkParams, student: NetworkParams,
               decay: float) -> NetworkParams:
    """theta_t <- decay * theta_t + (1 - decay) * theta_s, elementwise."""
    if teacher.tensors.keys() != student.tensors.keys():
        raise ConsistencyError("teacher/student parameter sets differ")
    d = np.float32(decay)
    one_m = np.float32(1.0 - float(decay))
    out = {}
    for k, tv in teacher.tensors.items():
        sv = student.tensors[k]
        if tv.shape != sv.shape:
            raise ConsistencyError(f"shape mismatch for {k}: {tv.shape} vs {sv.shape}")
        out[k] = d * tv + one_m * sv
    return NetworkParams(teacher.config, out)
