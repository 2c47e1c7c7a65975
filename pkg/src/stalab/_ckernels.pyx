# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled conv2d and bilinear sampling kernels (float64, valid padding)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef void _im2col(double[:, :, ::1] x, double[:, ::1] cols, Py_ssize_t R, Py_ssize_t S,
                  Py_ssize_t stride, Py_ssize_t Ho, Py_ssize_t Wo) noexcept nogil:
    cdef Py_ssize_t C = x.shape[0], c, r, s, i, j, row
    cdef double *dst
    cdef double *srow
    for c in range(C):
        for r in range(R):
            for s in range(S):
                row = (c * R + r) * S + s
                dst = &cols[row, 0]
                for i in range(Ho):
                    srow = &x[c, i * stride + r, s]
                    for j in range(Wo):
                        dst[i * Wo + j] = srow[j * stride]


cdef void _col2im(double[:, ::1] gcols, double[:, :, ::1] gx, Py_ssize_t R, Py_ssize_t S,
                  Py_ssize_t stride, Py_ssize_t Ho, Py_ssize_t Wo) noexcept nogil:
    cdef Py_ssize_t C = gx.shape[0], c, r, s, i, j, row
    cdef double *src
    cdef double *drow
    for c in range(C):
        for r in range(R):
            for s in range(S):
                row = (c * R + r) * S + s
                src = &gcols[row, 0]
                for i in range(Ho):
                    drow = &gx[c, i * stride + r, s]
                    for j in range(Wo):
                        drow[j * stride] += src[i * Wo + j]


def conv2d_forward(double[:, :, ::1] x, double[:, :, :, ::1] w, Py_ssize_t stride):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t K = w.shape[0], R = w.shape[2], S = w.shape[3]
    cdef Py_ssize_t Ho = (H - R) // stride + 1, Wo = (W - S) // stride + 1
    cols = np.empty((C * R * S, Ho * Wo))
    _im2col(x, cols, R, S, stride, Ho, Wo)
    out = np.dot(np.asarray(w).reshape(K, C * R * S), cols)
    return out.reshape(K, Ho, Wo)


def conv2d_backward(double[:, :, ::1] x, double[:, :, :, ::1] w,
                    double[:, :, ::1] gout, Py_ssize_t stride):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t K = w.shape[0], R = w.shape[2], S = w.shape[3]
    cdef Py_ssize_t Ho = gout.shape[1], Wo = gout.shape[2]
    cols = np.empty((C * R * S, Ho * Wo))
    _im2col(x, cols, R, S, stride, Ho, Wo)
    g2 = np.asarray(gout).reshape(K, Ho * Wo)
    w2 = np.asarray(w).reshape(K, C * R * S)
    gw = np.dot(g2, cols.T).reshape(K, C, R, S)
    gcols = np.ascontiguousarray(np.dot(w2.T, g2))
    gx = np.zeros((C, H, W))
    _col2im(gcols, gx, R, S, stride, Ho, Wo)
    return gx, gw


def bilinear_forward(double[:, :, ::1] src, double[::1] ys, double[::1] xs, fill):
    cdef Py_ssize_t C = src.shape[0], H = src.shape[1], W = src.shape[2]
    cdef Py_ssize_t N = ys.shape[0]
    cdef bint clamp = fill is None
    cdef double[::1] fv
    fill_arr = np.zeros(C) if clamp else np.ascontiguousarray(fill, dtype=np.float64)
    fv = fill_arr
    out_arr = np.zeros((C, N))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t n, c, q, yy, xx, y0, x0
    cdef double fy, fx, wt
    cdef bint valid
    with nogil:
        for n in range(N):
            y0 = <Py_ssize_t> floor(ys[n])
            x0 = <Py_ssize_t> floor(xs[n])
            fy = ys[n] - y0
            fx = xs[n] - x0
            for q in range(4):
                yy = y0 + (q >> 1)
                xx = x0 + (q & 1)
                wt = (fy if (q >> 1) else 1.0 - fy) * (fx if (q & 1) else 1.0 - fx)
                if clamp:
                    if yy < 0:
                        yy = 0
                    elif yy > H - 1:
                        yy = H - 1
                    if xx < 0:
                        xx = 0
                    elif xx > W - 1:
                        xx = W - 1
                    valid = True
                else:
                    valid = 0 <= yy < H and 0 <= xx < W
                for c in range(C):
                    if valid:
                        out[c, n] += wt * src[c, yy, xx]
                    else:
                        out[c, n] += wt * fv[c]
    return out_arr


def bilinear_backward(double[:, ::1] gout, double[::1] ys, double[::1] xs,
                      Py_ssize_t H, Py_ssize_t W, bint has_fill):
    cdef Py_ssize_t C = gout.shape[0], N = ys.shape[0]
    gsrc_arr = np.zeros((C, H, W))
    gfill_arr = np.zeros(C)
    cdef double[:, :, ::1] gsrc = gsrc_arr
    cdef double[::1] gfill = gfill_arr
    cdef Py_ssize_t n, c, q, yy, xx, y0, x0
    cdef double fy, fx, wt
    cdef bint valid
    with nogil:
        for q in range(4):
            for n in range(N):
                y0 = <Py_ssize_t> floor(ys[n])
                x0 = <Py_ssize_t> floor(xs[n])
                fy = ys[n] - y0
                fx = xs[n] - x0
                yy = y0 + (q >> 1)
                xx = x0 + (q & 1)
                wt = (fy if (q >> 1) else 1.0 - fy) * (fx if (q & 1) else 1.0 - fx)
                if not has_fill:
                    if yy < 0:
                        yy = 0
                    elif yy > H - 1:
                        yy = H - 1
                    if xx < 0:
                        xx = 0
                    elif xx > W - 1:
                        xx = W - 1
                    valid = True
                else:
                    valid = 0 <= yy < H and 0 <= xx < W
                for c in range(C):
                    if valid:
                        gsrc[c, yy, xx] += wt * gout[c, n]
                    else:
                        gfill[c] += wt * gout[c, n]
    return gsrc_arr, gfill_arr
