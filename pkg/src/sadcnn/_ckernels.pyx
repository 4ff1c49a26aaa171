# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: error diffusion, im2col and direct convolution.

Every function here has a numpy/pure-Python twin in ``_pykernels`` with the
same signature; ``kernels`` picks one at import time.
"""

import numpy as np
from cython.parallel cimport prange
from libc.string cimport memcpy, memset

ctypedef fused real:
    float
    double


def error_diffuse_fs(double[:, ::1] work, bint serpentine=False):
    """Floyd-Steinberg on ``work`` (modified in place). Returns uint8 0/1."""
    cdef Py_ssize_t h = work.shape[0], w = work.shape[1]
    cdef Py_ssize_t y, i, x, d
    cdef double v, err
    out = np.zeros((h, w), dtype=np.uint8)
    cdef unsigned char[:, ::1] o = out
    with nogil:
        for y in range(h):
            d = -1 if (serpentine and (y & 1)) else 1
            for i in range(w):
                x = (w - 1 - i) if d < 0 else i
                v = work[y, x]
                if v >= 0.5:
                    o[y, x] = 1
                    err = v - 1.0
                else:
                    err = v
                if 0 <= x + d < w:
                    work[y, x + d] += err * 0.4375
                if y + 1 < h:
                    if 0 <= x - d < w:
                        work[y + 1, x - d] += err * 0.1875
                    work[y + 1, x] += err * 0.3125
                    if 0 <= x + d < w:
                        work[y + 1, x + d] += err * 0.0625
    return out


def im2col(real[:, :, :, ::1] x, int k, int pad, int y0, int y1):
    """Patch matrix of a channels-last (N, H, W, C) array for output rows ``y0:y1``.

    Shape (N*(y1-y0)*W, k*k*C); row order (n, y, x), column order (i, j, c).
    Out-of-image taps are 0.
    """
    cdef Py_ssize_t n_img = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t rows = y1 - y0
    cdef Py_ssize_t span = k * C
    cdef Py_ssize_t n, y, xo, i, t, yy, r, j_lo, j_hi
    cdef real* orow
    cdef real* xrow
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out = np.empty((n_img * rows * W, k * span), dtype=dtype)
    if out.size == 0:
        return out
    cdef real[:, ::1] o = out
    with nogil:
        for n in range(n_img):
            for y in range(y0, y1):
                for xo in range(W):
                    r = (n * rows + (y - y0)) * W + xo
                    orow = &o[r, 0]
                    j_lo = pad - xo if pad > xo else 0
                    j_hi = W + pad - xo if W + pad - xo < k else k
                    for i in range(k):
                        yy = y + i - pad
                        if yy < 0 or yy >= H:
                            memset(orow, 0, span * sizeof(real))
                        else:
                            if j_lo > 0:
                                memset(orow, 0, j_lo * C * sizeof(real))
                            xrow = &x[n, yy, 0, 0]
                            memcpy(orow + j_lo * C, xrow + (xo + j_lo - pad) * C,
                                   (j_hi - j_lo) * C * sizeof(real))
                            if j_hi < k:
                                memset(orow + j_hi * C, 0, (k - j_hi) * C * sizeof(real))
                        orow += span
    return out


def conv2d_direct_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                          real[::1] b, int pad, int num_threads=1):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t job, n, o, y, xo, c, i, j, yy, xx
    cdef double acc
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out = np.empty((N, O, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] res = out
    for job in prange(N * O, nogil=True, num_threads=num_threads, schedule="static"):
        n = job // O
        o = job % O
        for y in range(H):
            for xo in range(W):
                acc = b[o]
                for c in range(C):
                    for i in range(k):
                        yy = y + i - pad
                        if yy < 0 or yy >= H:
                            continue
                        for j in range(k):
                            xx = xo + j - pad
                            if xx >= 0 and xx < W:
                                acc = acc + w[o, c, i, j] * x[n, c, yy, xx]
                res[n, o, y, xo] = <real>acc
    return out


def conv2d_direct_backward(real[:, :, :, ::1] x, real[:, :, :, ::1] w,
                           real[:, :, :, ::1] g, int pad, int num_threads=1):
    """Returns (grad_input, grad_weight, grad_bias) for a stride-1 conv."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t job, n, o, y, xo, c, i, j, yy, xx
    cdef double acc
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gx_arr = np.empty((N, C, H, W), dtype=dtype)
    gw_arr = np.empty((O, C, k, k), dtype=dtype)
    gb_arr = np.empty(O, dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef real[:, :, :, ::1] gw = gw_arr
    cdef real[::1] gb = gb_arr

    # grad_input[n,c,yy,xx] = sum_{o,i,j} w[o,c,i,j] * g[n,o,yy-i+pad,xx-j+pad]
    for job in prange(N * C, nogil=True, num_threads=num_threads, schedule="static"):
        n = job // C
        c = job % C
        for yy in range(H):
            for xx in range(W):
                acc = 0.0
                for o in range(O):
                    for i in range(k):
                        y = yy - i + pad
                        if y < 0 or y >= H:
                            continue
                        for j in range(k):
                            xo = xx - j + pad
                            if xo >= 0 and xo < W:
                                acc = acc + w[o, c, i, j] * g[n, o, y, xo]
                gx[n, c, yy, xx] = <real>acc

    for o in prange(O, nogil=True, num_threads=num_threads, schedule="static"):
        acc = 0.0
        for n in range(N):
            for y in range(H):
                for xo in range(W):
                    acc = acc + g[n, o, y, xo]
        gb[o] = <real>acc
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    acc = 0.0
                    for n in range(N):
                        for y in range(H):
                            yy = y + i - pad
                            if yy < 0 or yy >= H:
                                continue
                            for xo in range(W):
                                xx = xo + j - pad
                                if xx >= 0 and xx < W:
                                    acc = acc + g[n, o, y, xo] * x[n, c, yy, xx]
                    gw[o, c, i, j] = <real>acc
    return gx_arr, gw_arr, gb_arr
