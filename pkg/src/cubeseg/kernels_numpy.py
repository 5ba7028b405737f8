"""Pure-numpy 3x3x3 stride-1 convolution kernels (im2col + BLAS).

Reference path for the numba kernels; also the fallback when numba is not
installed. Dtype-generic, so gradient checks can run these in float64.
Tensors are (B, C, D, H, W); padding is fixed at 1 so spatial dims are
preserved.
"""
import numpy as np


def _windows(x: np.ndarray) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    return np.lib.stride_tricks.sliding_window_view(xp, (3, 3, 3), axis=(2, 3, 4))


def conv3_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    B, Ci, D, H, W = x.shape
    Co = w.shape[0]
    win = _windows(x)  # (B, Ci, D, H, W, 3, 3, 3)
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(B * D * H * W, Ci * 27)
    y = cols @ w.reshape(Co, Ci * 27).T + b
    return np.ascontiguousarray(y.reshape(B, D, H, W, Co).transpose(0, 4, 1, 2, 3))


def conv3_bwd_x(dy: np.ndarray, w: np.ndarray) -> np.ndarray:
    # adjoint of conv3_fwd w.r.t. input: same conv with flipped, transposed taps
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    zero = np.zeros(wt.shape[0], dtype=dy.dtype)
    return conv3_fwd(dy, wt, zero)


def conv3_bwd_w(dy: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    B, Ci, D, H, W = x.shape
    Co = dy.shape[1]
    win = _windows(x)
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(B * D * H * W, Ci * 27)
    dyf = dy.transpose(0, 2, 3, 4, 1).reshape(B * D * H * W, Co)
    dw = (dyf.T @ cols).reshape(Co, Ci, 3, 3, 3)
    db = dy.sum(axis=(0, 2, 3, 4))
    return dw, db
