"""Network building blocks: dispatched conv plus numpy layers.

Every op comes as a fwd/bwd pair over (B, C, D, H, W) tensors. The 3x3x3
convolutions go through the selected backend (see backend.py); everything
else is memory-bound and stays in plain numpy.
"""
import numpy as np

from . import backend, kernels_numpy
from .errors import DimensionError

try:
    from . import kernels_numba
except ImportError:
    kernels_numba = None


def _k():
    if backend.get_backend() == "numba" and kernels_numba is not None:
        return kernels_numba
    return kernels_numpy


def conv3_fwd(x, w, b):
    return _k().conv3_fwd(x, w, b)


def conv3_bwd_x(dy, w):
    return _k().conv3_bwd_x(dy, w)


def conv3_bwd_w(dy, x):
    return _k().conv3_bwd_w(dy, x)


# ----- 1x1x1 conv (classifier head of the segmentation decoder) -----

def conv1_fwd(x, w, b):
    B, C = x.shape[0], x.shape[1]
    xt = x.reshape(B, C, -1)
    y = np.einsum("oc,bcs->bos", w, xt, optimize=True) + b[None, :, None]
    return y.reshape(B, w.shape[0], *x.shape[2:]).astype(x.dtype, copy=False)


def conv1_bwd(dy, x, w):
    B, C = x.shape[0], x.shape[1]
    dyt = dy.reshape(B, dy.shape[1], -1)
    xt = x.reshape(B, C, -1)
    dw = np.einsum("bos,bcs->oc", dyt, xt, optimize=True)
    db = dyt.sum(axis=(0, 2))
    dx = np.einsum("oc,bos->bcs", w, dyt, optimize=True).reshape(x.shape)
    return dx.astype(x.dtype, copy=False), dw, db


# ----- instance norm (per sample, per channel over spatial dims) -----

IN_EPS = 1e-5


def instnorm_fwd(x, g, bt, eps=IN_EPS):
    ax = (2, 3, 4)
    mu = x.mean(axis=ax, keepdims=True, dtype=np.float64)
    var = x.var(axis=ax, keepdims=True, dtype=np.float64)
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = ((x - mu) * invstd).astype(x.dtype)
    y = g[None, :, None, None, None] * xhat + bt[None, :, None, None, None]
    return y, (xhat, invstd, g)


def instnorm_bwd(dy, cache):
    xhat, invstd, g = cache
    ax = (2, 3, 4)
    dxhat = dy * g[None, :, None, None, None]
    m1 = dxhat.mean(axis=ax, keepdims=True, dtype=np.float64)
    m2 = (dxhat * xhat).mean(axis=ax, keepdims=True, dtype=np.float64)
    dx = (invstd * (dxhat - m1 - xhat * m2)).astype(dy.dtype)
    dg = (dy * xhat).sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(dy.dtype)
    dbt = dy.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(dy.dtype)
    return dx, dg, dbt


# ----- leaky relu -----

LRELU_SLOPE = 0.1


def lrelu_fwd(x):
    neg = x < 0
    y = np.where(neg, LRELU_SLOPE * x, x)
    return y, neg


def lrelu_bwd(dy, neg):
    return np.where(neg, LRELU_SLOPE * dy, dy)


# ----- fused norm + activation (the per-block hot path) -----

def norm_act_fwd(x, g, bt):
    """Instance norm followed by leaky relu. Returns (y, cache)."""
    if backend.get_backend() == "numba" and kernels_numba is not None \
            and x.dtype == np.float32:
        y, xhat, invstd = kernels_numba.norm_act_fwd(
            x, g, bt, IN_EPS, np.float32(LRELU_SLOPE))
        return y, (xhat, invstd)
    n, cache = instnorm_fwd(x, g, bt)
    y, _ = lrelu_fwd(n)
    return y, (cache[0], cache[1])


def norm_act_bwd(dy, y, cache, g):
    """Backward through leaky relu + instance norm; y is the fwd output."""
    xhat, invstd = cache
    if backend.get_backend() == "numba" and kernels_numba is not None \
            and dy.dtype == np.float32:
        return kernels_numba.norm_act_bwd(dy, y, xhat, invstd, g,
                                          np.float32(LRELU_SLOPE))
    dn = lrelu_bwd(dy, y < 0)
    return instnorm_bwd(dn, (xhat, invstd, g))


# ----- 2x average pooling -----

def avgpool2_fwd(x):
    B, C, D, H, W = x.shape
    if D % 2 or H % 2 or W % 2:
        raise DimensionError(f"avgpool needs even spatial dims, got {(D, H, W)}")
    r = x.reshape(B, C, D // 2, 2, H // 2, 2, W // 2, 2)
    return r.mean(axis=(3, 5, 7), dtype=x.dtype)


def avgpool2_bwd(dy):
    B, C, D, H, W = dy.shape
    scaled = dy * np.asarray(0.125, dtype=dy.dtype)
    out = np.broadcast_to(scaled[:, :, :, None, :, None, :, None],
                          (B, C, D, 2, H, 2, W, 2))
    return out.reshape(B, C, 2 * D, 2 * H, 2 * W).copy()


# ----- 2x trilinear upsampling (separable; adjoint pair) -----

def _up_axis(x, axis):
    xs = np.moveaxis(x, axis, -1)
    d = xs.shape[-1]
    out = np.empty(xs.shape[:-1] + (2 * d,), dtype=x.dtype)
    ev = out[..., 0::2]
    od = out[..., 1::2]
    ev[..., 0] = xs[..., 0]
    if d > 1:
        ev[..., 1:] = 0.25 * xs[..., :-1] + 0.75 * xs[..., 1:]
        od[..., :-1] = 0.75 * xs[..., :-1] + 0.25 * xs[..., 1:]
    od[..., -1] = xs[..., -1]
    return np.moveaxis(out, -1, axis)


def _down_axis_adj(dy, axis):
    dys = np.moveaxis(dy, axis, -1)
    de = dys[..., 0::2]
    do = dys[..., 1::2]
    d = de.shape[-1]
    dx = np.zeros(dys.shape[:-1] + (d,), dtype=dy.dtype)
    dx[..., 0] += de[..., 0]
    if d > 1:
        dx[..., 1:] += 0.75 * de[..., 1:]
        dx[..., :-1] += 0.25 * de[..., 1:]
        dx[..., :-1] += 0.75 * do[..., :-1]
        dx[..., 1:] += 0.25 * do[..., :-1]
    dx[..., -1] += do[..., -1]
    return np.moveaxis(dx, -1, axis)


def upsample2_fwd(x):
    for axis in (2, 3, 4):
        x = _up_axis(x, axis)
    return x


def upsample2_bwd(dy):
    for axis in (4, 3, 2):
        dy = _down_axis_adj(dy, axis)
    return dy


# ----- global average pool + fully connected -----

def gap_fwd(x):
    return x.mean(axis=(2, 3, 4), dtype=np.float64).astype(x.dtype)


def gap_bwd(dy, spatial_shape):
    m = spatial_shape[0] * spatial_shape[1] * spatial_shape[2]
    scaled = dy / np.asarray(m, dtype=dy.dtype)
    return np.broadcast_to(scaled[:, :, None, None, None],
                           dy.shape + spatial_shape).copy()


def fc_fwd(x, w, b):
    return x @ w.T + b


def fc_bwd(dy, x, w):
    dw = dy.T @ x
    db = dy.sum(axis=0)
    dx = dy @ w
    return dx, dw, db
