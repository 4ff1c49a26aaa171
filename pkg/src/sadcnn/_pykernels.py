"""Pure-Python/numpy twins of the compiled kernels in ``_ckernels``.

Results match the compiled versions bit for bit for error diffusion and
im2col; the direct convolutions agree to float rounding.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def error_diffuse_fs(work, serpentine=False):
    h, w = work.shape
    out = np.zeros((h, w), dtype=np.uint8)
    rows = work.tolist()
    for y in range(h):
        row = rows[y]
        below = rows[y + 1] if y + 1 < h else None
        d = -1 if (serpentine and y & 1) else 1
        xs = range(w - 1, -1, -1) if d < 0 else range(w)
        for x in xs:
            v = row[x]
            if v >= 0.5:
                out[y, x] = 1
                err = v - 1.0
            else:
                err = v
            if 0 <= x + d < w:
                row[x + d] += err * 0.4375
            if below is not None:
                if 0 <= x - d < w:
                    below[x - d] += err * 0.1875
                below[x] += err * 0.3125
                if 0 <= x + d < w:
                    below[x + d] += err * 0.0625
    work[...] = rows
    return out


def im2col(x, k, pad, y0, y1):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    xp = xp[:, y0:y1 + k - 1]
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # n, rows, w, c, k, k
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * (y1 - y0) * w, k * k * c)


def conv2d_direct_forward(x, w, b, pad, num_threads=1):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, o, h, wd), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            out += np.einsum("oc,nchw->nohw", w[:, :, i, j], xp[:, :, i:i + h, j:j + wd])
    out += b[None, :, None, None]
    return out.astype(x.dtype)


def conv2d_direct_backward(x, w, g, pad, num_threads=1):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    gxp = np.zeros(xp.shape, dtype=np.float64)
    gw = np.zeros(w.shape, dtype=np.float64)
    for i in range(k):
        for j in range(k):
            gw[:, :, i, j] = np.einsum("nohw,nchw->oc", g, xp[:, :, i:i + h, j:j + wd])
            gxp[:, :, i:i + h, j:j + wd] += np.einsum("oc,nohw->nchw", w[:, :, i, j], g)
    gx = gxp[:, :, pad:pad + h, pad:pad + wd]
    gb = g.sum(axis=(0, 2, 3), dtype=np.float64)
    return (np.ascontiguousarray(gx, dtype=x.dtype), gw.astype(x.dtype), gb.astype(x.dtype))
