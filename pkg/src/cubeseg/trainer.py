"""Teacher-student training loop with cube mixing and pseudo-label blending.

One optimizer step per batch covers: teacher pseudo-labels on unlabeled
crops, per-image cube forwards (within branch + location head), histogram
update and blending into the refined unlabeled target, cross-image cube
mixing with recovery, dice/cross-entropy losses, SGD-with-momentum on the
student, and the EMA teacher update. Teacher outputs and refined labels are
gradient-free; gradients only flow through student forwards.

All randomness is derived statelessly from (master seed, stream, iteration),
so identical seeds give bit-identical metrics and a checkpoint resume
continues exactly where the original run would have gone.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import cubes
from .blending import ClassHistogram, blend_arrays, count_organ_voxels, weight_lut
from .errors import ConfigError
from .losses import (LossReport, LossWeights, assemble_total, ce_location_grad,
                     dice_loss_grad, lr_schedule)
from .model import (ModelConfig, NetworkParams, cls_backward, cls_forward,
                    ema_update, init_params, net_backward, net_forward)
from .phantom import Dataset
from .volume import normalize, random_crop, softmax_channels_array

MIX_SCOPES = ("LU", "U")
SUP_MODES = ("blend", "teacher", "mutual")
BASELINE_AUGS = ("cutmix", "cutout", "mixup")


@dataclass(frozen=True)
class TrainConfig:
    num_classes: int = 5
    crop_size: int = 24
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    n_cubes: int = 3
    max_iter: int = 2000
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_kind: str = "poly"
    lr_step_len: int = 12000
    alpha_max: float = 1.0
    ramp_iters: int = -1          # -1 means 0.4 * max_iter
    beta: float = 0.1
    ema_decay: float = 0.99
    hist_window: int = 40         # iterations retained by the class histogram
    background_blend_weight: float = 0.0
    cross: bool = True
    within: bool = True
    loc: bool = True
    blend: bool = True
    scramble: bool = False
    mix_scope: str = "LU"
    sup_mode: str = "blend"
    baseline_aug: str | None = None
    mt_noise_std: float = 0.1
    base_width: int = 4
    depth: int = 2
    cls_hidden: int = 64
    seed: int = 0
    checkpoint_interval: int = 0
    val_interval: int = 0

    def __post_init__(self):
        step = 1 << self.depth
        cube = self.crop_size // self.n_cubes if self.n_cubes else 0
        if self.n_cubes < 1 or self.crop_size % self.n_cubes:
            raise ConfigError(
                f"crop {self.crop_size} not divisible by n_cubes {self.n_cubes}")
        if self.crop_size % step or cube % step:
            raise ConfigError(
                f"crop {self.crop_size} and cube {cube} must be divisible by "
                f"2^depth = {step}")
        if self.batch_labeled < 1 or self.batch_unlabeled < 0:
            raise ConfigError("need batch_labeled >= 1 and batch_unlabeled >= 0")
        if self.mix_scope not in MIX_SCOPES:
            raise ConfigError(f"mix_scope must be one of {MIX_SCOPES}")
        if self.sup_mode not in SUP_MODES:
            raise ConfigError(f"sup_mode must be one of {SUP_MODES}")
        if self.baseline_aug is not None:
            if self.baseline_aug not in BASELINE_AUGS:
                raise ConfigError(f"baseline_aug must be one of {BASELINE_AUGS}")
            if self.cross:
                raise ConfigError("baseline_aug replaces the cross branch; set cross=false")
            if self.baseline_aug in ("cutmix", "mixup") and self.batch_unlabeled < 2:
                raise ConfigError(f"{self.baseline_aug} needs batch_unlabeled >= 2")
        if self.scramble and not self.cross:
            raise ConfigError("scramble applies to the cross branch; set cross=true")
        if self.cross and self.mix_scope == "U" and self.batch_unlabeled < 1:
            raise ConfigError("mix_scope=U needs unlabeled images to mix")
        if self.sup_mode == "mutual" and not self.within:
            raise ConfigError("mutual supervision needs the within branch")
        if self.max_iter < 0:
            raise ConfigError("max_iter must be >= 0")

    @property
    def n_loc(self) -> int:
        return self.n_cubes ** 3

    @property
    def ramp(self) -> int:
        return int(0.4 * self.max_iter) if self.ramp_iters < 0 else self.ramp_iters

    @property
    def effective_sup(self) -> str:
        if self.sup_mode == "blend" and not (self.blend and self.within):
            return "teacher"
        return self.sup_mode

    def model_config(self) -> ModelConfig:
        return ModelConfig(num_classes=self.num_classes, n_locations=self.n_loc,
                           base_width=self.base_width, depth=self.depth,
                           cls_hidden=self.cls_hidden)

    def loss_weights(self, it: int) -> LossWeights:
        return LossWeights(alpha=0.0, beta=self.beta, alpha_max=self.alpha_max,
                           ramp_iters=max(self.ramp, 0)).at_iteration(it)


@dataclass
class TrainState:
    student: NetworkParams
    teacher: NetworkParams
    momentum: dict
    iteration: int
    hist: ClassHistogram


@dataclass(frozen=True)
class BatchItem:
    x: np.ndarray                 # normalized crop (S, S, S) float32
    y: np.ndarray | None          # labels (S, S, S) uint8, labeled items only
    labeled: bool
    case_id: int


def init_state(cfg: TrainConfig) -> TrainState:
    student = init_params(cfg.model_config(), np.random.default_rng([cfg.seed, 11]))
    teacher = student.copy()
    mom = {k: np.zeros_like(v) for k, v in student.tensors.items()}
    cap = cfg.hist_window * max(cfg.batch_unlabeled, 1)
    return TrainState(student, teacher, mom, 0,
                      ClassHistogram(cfg.num_classes, cap))


def _stream(cfg: TrainConfig, tag: int, it: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, tag, it])


def compose_batch(ds: Dataset, cfg: TrainConfig,
                  rng: np.random.Generator) -> list[BatchItem]:
    """Normalize + random-crop freshly drawn labeled and unlabeled cases."""
    if not ds.labeled:
        raise ConfigError("dataset has no labeled cases")
    if cfg.batch_unlabeled > 0 and not ds.unlabeled:
        raise ConfigError("unlabeled losses enabled but the dataset has no "
                          "unlabeled cases")
    size = (cfg.crop_size,) * 3
    items = []
    idx_l = rng.choice(len(ds.labeled), size=cfg.batch_labeled,
                       replace=len(ds.labeled) < cfg.batch_labeled)
    for i in idx_l:
        vol, lab = ds.labeled[int(i)]
        v, y = random_crop(normalize(vol), lab, size, rng)
        items.append(BatchItem(v.data, y.data, True, ds.labeled_ids[int(i)]))
    if cfg.batch_unlabeled > 0:
        idx_u = rng.choice(len(ds.unlabeled), size=cfg.batch_unlabeled,
                           replace=len(ds.unlabeled) < cfg.batch_unlabeled)
        for i in idx_u:
            v, _ = random_crop(normalize(ds.unlabeled[int(i)]), None, size, rng)
            items.append(BatchItem(v.data, None, False, ds.unlabeled_ids[int(i)]))
    return items


def _softmax_bwd(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    dot = (probs * dprobs).sum(axis=1, keepdims=True)
    return (probs * (dprobs - dot)).astype(np.float32)


def _merge(total: dict, grads: dict) -> None:
    for k, v in grads.items():
        if k in total:
            total[k] += v
        else:
            total[k] = v


def _recover_stack(probs: np.ndarray, grids: list[cubes.CubeGrid],
                   n3: int) -> np.ndarray:
    out = []
    for i, g in enumerate(grids):
        cg = cubes.CubeGrid(probs[i * n3:(i + 1) * n3], g.n_per_axis,
                            g.locations, g.sources)
        out.append(cubes.recover(cg))
    return np.stack(out)


def _scatter_stack(dmaps: np.ndarray, grids: list[cubes.CubeGrid],
                   n3: int) -> np.ndarray:
    """Adjoint of _recover_stack: route per-image gradients to cube slots."""
    outs = []
    for i, g in enumerate(grids):
        split = cubes._split(dmaps[i], g.n_per_axis)
        outs.append(split[g.locations])
    return np.concatenate(outs, axis=0)


def _augment_unlabeled(xs_u: np.ndarray, raw_lab: np.ndarray | None,
                       p_t: np.ndarray | None, cfg: TrainConfig,
                       rng: np.random.Generator):
    """Student input + pseudo-target for the no-cross branch (plain mean
    teacher or an interpolation baseline)."""
    bu = xs_u.shape[0]
    if cfg.baseline_aug is None:
        noise = rng.normal(0.0, cfg.mt_noise_std, xs_u.shape).astype(np.float32)
        np.clip(noise, -2 * cfg.mt_noise_std, 2 * cfg.mt_noise_std, out=noise)
        return xs_u + noise, raw_lab
    dims = xs_u.shape[1:]
    xs_aug = np.empty_like(xs_u)
    targets = np.empty_like(raw_lab)
    for i in range(bu):
        j = (i + 1) % bu
        if cfg.baseline_aug == "mixup":
            lam = float(rng.random())
            xs_aug[i] = lam * xs_u[i] + (1 - lam) * xs_u[j]
            targets[i] = (lam * p_t[i] + (1 - lam) * p_t[j]).argmax(axis=0)
        else:
            size = tuple(max(1, d // 2) for d in dims)
            off, size = cubes.draw_box(dims, size, rng)
            sl = tuple(slice(o, o + s) for o, s in zip(off, size))
            xs_aug[i] = xs_u[i]
            if cfg.baseline_aug == "cutmix":
                xs_aug[i][sl] = xs_u[j][sl]
                targets[i] = raw_lab[i]
                targets[i][sl] = raw_lab[j][sl]
            else:  # cutout
                xs_aug[i][sl] = 0.0
                targets[i] = raw_lab[i]
    return xs_aug, targets


def train_step(state: TrainState, batch: list[BatchItem],
               cfg: TrainConfig) -> tuple[LossReport, dict]:
    t = state.iteration
    mcfg = state.student.config
    tensors = state.student.tensors
    n = cfg.n_cubes
    n3 = cfg.n_loc
    lw = cfg.loss_weights(t)
    lr = lr_schedule(cfg.lr_kind, t, cfg.base_lr, cfg.max_iter, cfg.lr_step_len)

    items_l = [it for it in batch if it.labeled]
    items_u = [it for it in batch if not it.labeled]
    bl, bu = len(items_l), len(items_u)
    xs_l = np.stack([it.x for it in items_l])
    ys_l = np.stack([it.y for it in items_l])
    xs_u = np.stack([it.x for it in items_u]) if bu else None
    n_imgs = bl + bu

    sup = cfg.effective_sup
    rng_mix = _stream(cfg, 202, t)
    rng_shuf = _stream(cfg, 303, t)
    rng_aug = _stream(cfg, 404, t)

    # (a) teacher pseudo-labels on the unlabeled crops
    p_t = raw_lab = None
    if bu and (sup in ("blend", "teacher") or cfg.baseline_aug):
        t_logits, _, _ = net_forward(mcfg, state.teacher.tensors, xs_u[:, None])
        p_t = softmax_channels_array(t_logits, axis=1)
        raw_lab = p_t.argmax(axis=1).astype(np.uint8)

    # (b) within-image branch: per-image cube forwards through the student
    need_cubes_l = cfg.within or cfg.loc
    need_cubes_u = bu > 0 and (cfg.loc or (cfg.within and sup in ("blend", "mutual")))
    grids_l = grids_u = None
    probs_cubes_l = probs_cubes_u = None
    cache_cubes_l = cache_cubes_u = None
    feats_l = feats_u = None
    p_in_l = p_in_u = None
    if need_cubes_l:
        grids_l = [cubes.shuffle_within(cubes.partition(it.x, n), rng_shuf)
                   for it in items_l]
        stack = np.concatenate([g.cubes for g in grids_l])[:, None]
        logits, feats_l, cache_cubes_l = net_forward(mcfg, tensors, stack,
                                                     need_cache=True)
        probs_cubes_l = softmax_channels_array(logits, axis=1)
        if cfg.within:
            p_in_l = _recover_stack(probs_cubes_l, grids_l, n3)
    if need_cubes_u:
        grids_u = [cubes.shuffle_within(cubes.partition(it.x, n), rng_shuf)
                   for it in items_u]
        stack = np.concatenate([g.cubes for g in grids_u])[:, None]
        need_cache_u = cfg.loc or sup == "mutual"
        logits, feats_u, cache_cubes_u = net_forward(mcfg, tensors, stack,
                                                     need_cache=need_cache_u)
        probs_cubes_u = softmax_channels_array(logits, axis=1)
        if cfg.within:
            p_in_u = _recover_stack(probs_cubes_u, grids_u, n3)

    # (c) refined pseudo-label: histogram -> weight map -> blend -> argmax
    y_u = None
    mean_omega = 0.0
    if bu and sup == "blend":
        for i in range(bu):
            entry = count_organ_voxels(raw_lab[i], cfg.num_classes)
            window = (state.hist.window + (entry,))[-state.hist.capacity:]
            state.hist = ClassHistogram(cfg.num_classes, state.hist.capacity, window)
        lut = weight_lut(state.hist.counts, cfg.background_blend_weight)
        omega = lut[raw_lab]
        p_blend = blend_arrays(p_t, p_in_u, omega)
        y_u = p_blend.argmax(axis=1).astype(np.uint8)
        mean_omega = float(omega.mean())
    elif bu and sup == "teacher" and cfg.baseline_aug is None:
        y_u = raw_lab

    # (d) cross-image branch (or its replacement when cross is off)
    if cfg.cross:
        mix_items = items_l + items_u if cfg.mix_scope == "LU" else items_u
        passthrough = xs_l if cfg.mix_scope == "U" else None
        grids_m = [cubes.partition(it.x, n, cubes.SourceTag(it.labeled, it.case_id))
                   for it in mix_items]
        mixed, mask = cubes.cross_mix(grids_m, None, rng_mix,
                                      scramble=cfg.scramble)
        mixed_stack = np.stack([cubes.assemble(g) for g in mixed])
        full = (mixed_stack if passthrough is None
                else np.concatenate([passthrough, mixed_stack]))
        n_pass = 0 if passthrough is None else passthrough.shape[0]
        logits_x, _, cache_x = net_forward(mcfg, tensors, full[:, None],
                                           need_cache=True)
        probs_x = softmax_channels_array(logits_x, axis=1)
        recovered = cubes.cross_recover(list(probs_x[n_pass:]), mask, n)
        if cfg.mix_scope == "LU":
            p_l_cross = np.stack(recovered[:bl])
            p_u_cross = np.stack(recovered[bl:]) if bu else None
        else:
            p_l_cross = probs_x[:n_pass]
            p_u_cross = np.stack(recovered) if bu else None
    else:
        mask = None
        if bu:
            xs_aug, y_u_aug = _augment_unlabeled(xs_u, raw_lab, p_t, cfg, rng_aug)
            if cfg.baseline_aug is not None:
                y_u = y_u_aug
            full = np.concatenate([xs_l, xs_aug])
        else:
            full = xs_l
        logits_x, _, cache_x = net_forward(mcfg, tensors, full[:, None],
                                           need_cache=True)
        probs_x = softmax_channels_array(logits_x, axis=1)
        p_l_cross = probs_x[:bl]
        p_u_cross = probs_x[bl:] if bu else None

    # (e) location logits for every forwarded cube
    loc_logits = cls_cache = loc_targets = None
    if cfg.loc:
        feats_all = [f for f in (feats_l, feats_u) if f is not None]
        feats_all = np.concatenate(feats_all) if feats_all else None
        if feats_all is not None:
            loc_logits, cls_cache = cls_forward(mcfg, tensors, feats_all,
                                                need_cache=True)
            locs = [g.locations for g in (grids_l or [])] + \
                   [g.locations for g in (grids_u or [])]
            loc_targets = np.concatenate(locs)

    # (f) losses and gradient seeds
    l_cross_sup, d_pl_cross = dice_loss_grad(p_l_cross, ys_l)
    l_in_sup = 0.0
    d_pl_in = None
    if cfg.within:
        l_in_sup, d_pl_in = dice_loss_grad(p_in_l, ys_l)
    l_unsup = 0.0
    d_pu_cross = d_pu_in = None
    if bu and sup in ("blend", "teacher"):
        l_unsup, d_pu_cross = dice_loss_grad(p_u_cross, y_u)
    elif bu and sup == "mutual":
        tgt_in = p_in_u.argmax(axis=1).astype(np.uint8)
        tgt_cross = p_u_cross.argmax(axis=1).astype(np.uint8)
        la, d_pu_cross = dice_loss_grad(p_u_cross, tgt_in)
        lb, d_pu_in = dice_loss_grad(p_in_u, tgt_cross)
        l_unsup = 0.5 * (la + lb)
        d_pu_cross *= 0.5
        d_pu_in *= 0.5

    l_cls_sup = l_cls_unsup = 0.0
    d_loc = None
    if loc_logits is not None:
        d_loc = np.zeros_like(loc_logits)
        row = 0
        for g in grids_l or []:
            li, gi = ce_location_grad(loc_logits[row:row + n3], g.locations)
            l_cls_sup += li / n_imgs
            d_loc[row:row + n3] = gi / n_imgs
            row += n3
        for g in grids_u or []:
            li, gi = ce_location_grad(loc_logits[row:row + n3], g.locations)
            l_cls_unsup += li / n_imgs
            d_loc[row:row + n3] = gi / n_imgs
            row += n3

    report = assemble_total(l_cross_sup, l_in_sup, l_unsup, l_cls_sup,
                            l_cls_unsup, lw)

    # (g) backward through each student graph
    grads: dict[str, np.ndarray] = {}
    alpha = np.float32(lw.alpha)

    dprobs_x = np.zeros_like(probs_x)
    if cfg.cross:
        n_src = len(mix_items)
        d_sources = [np.zeros_like(probs_x[0]) for _ in range(n_src)]
        if cfg.mix_scope == "LU":
            for i in range(bl):
                d_sources[i] = d_pl_cross[i]
            if bu and d_pu_cross is not None:
                for i in range(bu):
                    d_sources[bl + i] = alpha * d_pu_cross[i]
        else:
            dprobs_x[:n_pass] = d_pl_cross
            if bu and d_pu_cross is not None:
                d_sources = [alpha * d for d in d_pu_cross]
        d_mixed = cubes.cross_recover_adjoint(d_sources, mask, n)
        dprobs_x[n_pass:] = np.stack(d_mixed)
    else:
        dprobs_x[:bl] = d_pl_cross
        if bu and d_pu_cross is not None:
            dprobs_x[bl:] = alpha * d_pu_cross
    _merge(grads, net_backward(mcfg, tensors, cache_x,
                               dlogits=_softmax_bwd(probs_x, dprobs_x)))

    dfeats_l = dfeats_u = None
    if d_loc is not None:
        d_loc *= np.float32(lw.beta)
        dfeats_all, cls_grads = cls_backward(mcfg, tensors, d_loc, cls_cache)
        _merge(grads, cls_grads)
        nl = bl * n3 if grids_l is not None else 0
        dfeats_l = dfeats_all[:nl] if grids_l is not None else None
        dfeats_u = dfeats_all[nl:] if grids_u is not None else None

    if cache_cubes_l is not None and (d_pl_in is not None or dfeats_l is not None):
        dlog = None
        if d_pl_in is not None:
            dcube = _scatter_stack(d_pl_in, grids_l, n3)
            dlog = _softmax_bwd(probs_cubes_l, dcube)
        _merge(grads, net_backward(mcfg, tensors, cache_cubes_l,
                                   dlogits=dlog, dfeats=dfeats_l))
    if cache_cubes_u is not None and (d_pu_in is not None or dfeats_u is not None):
        dlog = None
        if d_pu_in is not None:
            dcube = _scatter_stack(alpha * d_pu_in, grids_u, n3)
            dlog = _softmax_bwd(probs_cubes_u, dcube)
        _merge(grads, net_backward(mcfg, tensors, cache_cubes_u,
                                   dlogits=dlog, dfeats=dfeats_u))

    # (h) SGD with momentum and weight decay on touched parameters
    wd = np.float32(cfg.weight_decay)
    lr32 = np.float32(lr)
    m32 = np.float32(cfg.momentum)
    for k, g in grads.items():
        g = g + wd * tensors[k]
        buf = state.momentum[k]
        buf *= m32
        buf += g
        tensors[k] -= lr32 * buf

    # (i) EMA teacher update
    state.teacher = ema_update(state.teacher, state.student, cfg.ema_decay)
    state.iteration += 1
    extras = {"lr": lr, "alpha": lw.alpha, "mean_omega": mean_omega,
              "v": state.hist.counts, "unsup_target": y_u}
    return report, extras


CSV_FIELDS = ("iteration", "lr", "alpha", "l_cross_sup", "l_in_sup",
              "l_cross_in_unsup", "l_cls_sup", "l_cls_unsup", "total",
              "mean_omega")


def _csv_row(it, report: LossReport, extras: dict) -> list[str]:
    vals = [it, extras["lr"], extras["alpha"], report.l_cross_sup,
            report.l_in_sup, report.l_cross_in_unsup, report.l_cls_sup,
            report.l_cls_unsup, report.total, extras["mean_omega"]]
    vals += [int(v) for v in extras["v"]]
    return [f"{v:.10g}" if isinstance(v, float) else str(v) for v in vals]


def save_state(path, state: TrainState, cfg: TrainConfig) -> None:
    tensors = {}
    for k, v in state.student.tensors.items():
        tensors[f"student/{k}"] = v
    for k, v in state.teacher.tensors.items():
        tensors[f"teacher/{k}"] = v
    for k, v in state.momentum.items():
        tensors[f"mom/{k}"] = v
    tensors["meta/iteration"] = np.array([state.iteration], np.int64)
    window = (np.stack(state.hist.window) if state.hist.window
              else np.zeros((0, cfg.num_classes), np.int64))
    tensors["hist/window"] = window.astype(np.int64)
    tensors["hist/capacity"] = np.array([state.hist.capacity], np.int64)
    tensors["meta/config"] = ckpt.pack_config(asdict(cfg))
    ckpt.write_tensors(path, tensors)


def load_state(path) -> tuple[TrainState, TrainConfig]:
    tensors = ckpt.read_tensors(path)
    cfg = TrainConfig(**ckpt.unpack_config(tensors["meta/config"]))
    mcfg = cfg.model_config()
    student = NetworkParams(mcfg, {k[len("student/"):]: v for k, v in tensors.items()
                                   if k.startswith("student/")})
    teacher = NetworkParams(mcfg, {k[len("teacher/"):]: v for k, v in tensors.items()
                                   if k.startswith("teacher/")})
    mom = {k[len("mom/"):]: v for k, v in tensors.items() if k.startswith("mom/")}
    window = tuple(tensors["hist/window"])
    hist = ClassHistogram(cfg.num_classes, int(tensors["hist/capacity"][0]),
                          tuple(np.asarray(w, np.int64) for w in window))
    state = TrainState(student, teacher, mom, int(tensors["meta/iteration"][0]), hist)
    return state, cfg


def run(cfg: TrainConfig, ds: Dataset, out_dir=None, resume=None,
        val_cases=None, eval_cfg=None) -> TrainState:
    """Train for cfg.max_iter steps, streaming metrics.csv and periodic
    checkpoints into out_dir; optionally validate every val_interval steps."""
    if ds.num_classes != cfg.num_classes:
        raise ConfigError(f"dataset has {ds.num_classes} classes, "
                          f"config says {cfg.num_classes}")
    if resume is not None:
        state, stored = load_state(resume)
        if asdict(stored) != asdict(cfg):
            raise ConfigError("checkpoint config does not match the requested one")
    else:
        state = init_state(cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    val_rows = []
    t0 = time.time()
    for t in range(state.iteration, cfg.max_iter):
        batch = compose_batch(ds, cfg, _stream(cfg, 101, t))
        report, extras = train_step(state, batch, cfg)
        rows.append(_csv_row(t, report, extras))
        if out_dir is not None and cfg.checkpoint_interval and \
                state.iteration % cfg.checkpoint_interval == 0 and \
                state.iteration < cfg.max_iter:
            save_state(out_dir / f"ckpt_{state.iteration:06d}.mgck", state, cfg)
        if val_cases and cfg.val_interval and state.iteration % cfg.val_interval == 0:
            from .evaluate import EvalConfig, evaluate
            table = evaluate(state.student, val_cases, eval_cfg or EvalConfig())
            val_rows.append([state.iteration, f"{table.avg_dsc:.6f}",
                             f"{table.avg_nsd:.6f}"])
    if out_dir is not None:
        header = list(CSV_FIELDS) + [f"v_{c}" for c in range(1, cfg.num_classes + 1)]
        with open(out_dir / "metrics.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(rows)
        if val_rows:
            with open(out_dir / "val_metrics.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["iteration", "avg_dsc", "avg_nsd"])
                w.writerows(val_rows)
        save_state(out_dir / "ckpt_final.mgck", state, cfg)
        manifest = {"config": asdict(cfg), "iterations": state.iteration,
                    "wall_seconds": round(time.time() - t0, 3)}
        (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1))
    return state
