"""Pure numpy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_ckernels`` module; used when
the extension is not built or when ``STALAB_PURE_PYTHON=1`` is set.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, R, S, stride):
    win = sliding_window_view(x, (R, S), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d_forward(x, w, stride):
    K, C, R, S = w.shape
    win = _windows(x, R, S, stride)  # C, Ho, Wo, R, S
    return np.ascontiguousarray(np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4])))


def conv2d_backward(x, w, gout, stride):
    K, C, R, S = w.shape
    _, Ho, Wo = gout.shape
    win = _windows(x, R, S, stride)
    gw = np.tensordot(gout, win, axes=([1, 2], [1, 2]))  # K, C, R, S
    gx = np.zeros_like(x)
    for r in range(R):
        for s in range(S):
            contrib = np.tensordot(w[:, :, r, s], gout, axes=([0], [0]))
            gx[:, r:r + stride * (Ho - 1) + 1:stride, s:s + stride * (Wo - 1) + 1:stride] += contrib
    return gx, np.ascontiguousarray(gw)


def _corners(ys, xs, H, W, clamp):
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = ys - y0
    fx = xs - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    out = []
    for dy, dx, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                       (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy = y0 + dy
        xx = x0 + dx
        if clamp:
            valid = np.ones(yy.shape, dtype=bool)
            yy = np.clip(yy, 0, H - 1)
            xx = np.clip(xx, 0, W - 1)
        else:
            valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            yy = np.where(valid, yy, 0)
            xx = np.where(valid, xx, 0)
        out.append((yy * W + xx, wt, valid))
    return out


def bilinear_forward(src, ys, xs, fill):
    """Sample ``src`` (C, H, W) at float pixel coordinates.

    ``fill`` None clamps to the border; otherwise it is a (C,) array used for
    every neighbour that falls outside the image.
    """
    C, H, W = src.shape
    flat = src.reshape(C, H * W)
    out = np.zeros((C, ys.shape[0]))
    for idx, wt, valid in _corners(ys, xs, H, W, fill is None):
        vals = flat[:, idx]
        if fill is not None:
            vals = np.where(valid[None, :], vals, fill[:, None])
        out += wt[None, :] * vals
    return out


def bilinear_backward(gout, ys, xs, H, W, has_fill):
    C = gout.shape[0]
    gsrc = np.zeros((C, H * W))
    gfill = np.zeros(C)
    for idx, wt, valid in _corners(ys, xs, H, W, not has_fill):
        contrib = gout * wt[None, :]
        for c in range(C):
            gsrc[c] += np.bincount(idx[valid], weights=contrib[c][valid], minlength=H * W)
        if has_fill:
            gfill += contrib[:, ~valid].sum(axis=1)
    return gsrc.reshape(C, H, W), gfill
