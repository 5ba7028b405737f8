"""Dice and cube-location losses, loss assembly, and training schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, NumericError
from .volume import LabelMap, ProbMap

DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    alpha: float          # current unsupervised consistency weight
    beta: float = 0.1     # location-reasoning weight
    alpha_max: float = 1.0
    ramp_iters: int = 1000

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha_max < 0:
            raise NumericError("loss weights must be non-negative")
        if self.alpha > self.alpha_max + 1e-12:
            raise NumericError(f"alpha {self.alpha} exceeds alpha_max {self.alpha_max}")

    def at_iteration(self, it: int) -> "LossWeights":
        return replace(self, alpha=alpha_schedule(it, self))


@dataclass(frozen=True)
class LossReport:
    l_cross_sup: float
    l_in_sup: float
    l_cross_in_unsup: float
    l_cls_sup: float
    l_cls_unsup: float
    total: float

    FIELDS = ("l_cross_sup", "l_in_sup", "l_cross_in_unsup",
              "l_cls_sup", "l_cls_unsup", "total")

    @property
    def l_cls(self) -> float:
        return self.l_cls_sup + self.l_cls_unsup


def alpha_schedule(it: int, w: LossWeights) -> float:
    """Gaussian warm-up: alpha_max * exp(-5 (1 - min(t/ramp, 1))^2)."""
    if w.ramp_iters <= 0:
        return w.alpha_max
    frac = min(it / w.ramp_iters, 1.0)
    return w.alpha_max * math.exp(-5.0 * (1.0 - frac) ** 2)


def lr_schedule(kind: str, it: int, base_lr: float, max_iter: int,
                step_len: int = 12000, power: float = 0.9,
                step_decay: float = 0.1) -> float:
    if kind == "poly":
        frac = min(it / max_iter, 1.0) if max_iter > 0 else 1.0
        return base_lr * (1.0 - frac) ** power
    if kind == "step":
        return base_lr * step_decay ** (it // step_len)
    raise NumericError(f"unknown lr schedule kind {kind!r}")


def dice_terms(p: np.ndarray, y: np.ndarray, eps: float = DICE_EPS):
    """Per (batch, class) smoothed overlap terms for (B,C,...) probs and
    (B,...) integer labels. Returns (num, den) as float64."""
    if p.shape[0] != y.shape[0] or p.shape[2:] != y.shape[1:]:
        raise DimensionError(f"probs {p.shape} incompatible with labels {y.shape}")
    B, C = p.shape[:2]
    red = tuple(range(1, y.ndim))
    num = np.empty((B, C))
    den = np.empty((B, C))
    psum = p.sum(axis=tuple(range(2, p.ndim)), dtype=np.float64)
    for c in range(C):
        yc = (y == c)
        inter = (p[:, c] * yc).sum(axis=red, dtype=np.float64)
        ysum = yc.sum(axis=red, dtype=np.float64)
        num[:, c] = 2.0 * inter + eps
        den[:, c] = psum[:, c] + ysum + eps
    return num, den


def dice_loss_batch(p: np.ndarray, y: np.ndarray,
                    eps: float = DICE_EPS) -> float:
    """1 - mean over (batch, class) of the smoothed dice coefficient."""
    num, den = dice_terms(p, y, eps)
    return float(1.0 - (num / den).mean())


def dice_loss_grad(p: np.ndarray, y: np.ndarray,
                   eps: float = DICE_EPS) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. the probability tensor."""
    num, den = dice_terms(p, y, eps)
    loss = float(1.0 - (num / den).mean())
    B, C = p.shape[:2]
    scale = 1.0 / (B * C)
    ex = (1,) * (y.ndim - 1)
    nd = (num / den ** 2).reshape(B, C, *ex)
    inv = (2.0 / den).reshape(B, C, *ex)
    dp = np.empty_like(p)
    for c in range(C):
        yc = (y == c)
        dp[:, c] = (-scale * (inv[:, c] * yc - nd[:, c])).astype(p.dtype)
    return loss, dp


def dice_loss(p: ProbMap, y: LabelMap, eps: float = DICE_EPS) -> float:
    if p.kind != "probabilities":
        raise DimensionError("dice_loss expects a probability map")
    if p.num_channels != y.num_classes + 1:
        raise DimensionError(
            f"{p.num_channels} channels vs {y.num_classes} organ classes")
    if p.dims != y.dims:
        raise DimensionError(f"prob dims {p.dims} != label dims {y.dims}")
    return dice_loss_batch(p.data[None], y.data[None], eps)


def ce_location_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    return ce_location_grad(logits, targets)[0]


def ce_location_grad(logits: np.ndarray,
                     targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rows of -log softmax(row)[target], plus d/dlogits."""
    if logits.ndim != 2 or len(targets) != logits.shape[0]:
        raise DimensionError(
            f"need (M, K) logits with M targets, got {logits.shape} and {len(targets)}")
    m = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, dtype=np.float64))
    picked = shifted[np.arange(m), targets]
    loss = float((lse - picked).mean())
    soft = np.exp(shifted - lse[:, None].astype(logits.dtype))
    soft[np.arange(m), targets] -= 1.0
    return loss, (soft / m).astype(logits.dtype)


def assemble_total(l_cross_sup: float, l_in_sup: float, l_cross_in_unsup: float,
                   l_cls_sup: float, l_cls_unsup: float,
                   w: LossWeights) -> LossReport:
    """Supervised part + alpha/beta weighted unsupervised and location parts."""
    parts = {"l_cross_sup": l_cross_sup, "l_in_sup": l_in_sup,
             "l_cross_in_unsup": l_cross_in_unsup,
             "l_cls_sup": l_cls_sup, "l_cls_unsup": l_cls_unsup}
    for name, val in parts.items():
        if not math.isfinite(val):
            raise NumericError(f"loss part {name} is not finite: {val}")
    sup = l_cross_sup + l_in_sup + w.beta * l_cls_sup
    unsup = w.alpha * l_cross_in_unsup + w.beta * l_cls_unsup
    return LossReport(total=sup + unsup, **parts)
