# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: fused depthwise 3x3 convolution and gate routing math.

Semantics of record live in ``fallback.py``; these loops must agree with it
to float rounding. All arrays are C-contiguous, float32 or float64.
"""

cimport cython


ctypedef fused real:
    float
    double


def dwconv3x3_fwd(real[:, :, :, ::1] x, real[:, :, ::1] w, real[::1] b,
                  real[:, :, :, ::1] out):
    cdef Py_ssize_t nb = x.shape[0], h = x.shape[1], wd = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t n, i, j, k, di, dj, ii, jj
    cdef real acc
    for n in range(nb):
        for i in range(h):
            for j in range(wd):
                for k in range(c):
                    acc = b[k]
                    for di in range(3):
                        ii = i + di - 1
                        if ii < 0 or ii >= h:
                            continue
                        for dj in range(3):
                            jj = j + dj - 1
                            if jj < 0 or jj >= wd:
                                continue
                            acc = acc + w[k, di, dj] * x[n, ii, jj, k]
                    out[n, i, j, k] = acc


def dwconv3x3_bwd(real[:, :, :, ::1] gy, real[:, :, :, ::1] x, real[:, :, ::1] w,
                  real[:, :, :, ::1] gx, real[:, :, ::1] gw, real[::1] gb):
    cdef Py_ssize_t nb = x.shape[0], h = x.shape[1], wd = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t n, i, j, k, di, dj, ii, jj
    cdef real acc, g
    for n in range(nb):
        for i in range(h):
            for j in range(wd):
                for k in range(c):
                    # gx: correlate gy with the 180-degree flipped kernel
                    acc = 0
                    for di in range(3):
                        ii = i - (di - 1)
                        if ii < 0 or ii >= h:
                            continue
                        for dj in range(3):
                            jj = j - (dj - 1)
                            if jj < 0 or jj >= wd:
                                continue
                            acc = acc + w[k, di, dj] * gy[n, ii, jj, k]
                    gx[n, i, j, k] = acc
                    g = gy[n, i, j, k]
                    gb[k] = gb[k] + g
                    for di in range(3):
                        ii = i + di - 1
                        if ii < 0 or ii >= h:
                            continue
                        for dj in range(3):
                            jj = j + dj - 1
                            if jj < 0 or jj >= wd:
                                continue
                            gw[k, di, dj] = gw[k, di, dj] + g * x[n, ii, jj, k]


def gate_filter_fwd(real[:, ::1] gates, real[::1] cutoff,
                    real[:, ::1] out, unsigned char[:, ::1] active):
    cdef Py_ssize_t p = gates.shape[0], e = gates.shape[1]
    cdef Py_ssize_t i, k
    cdef real c
    for i in range(p):
        c = cutoff[i]
        for k in range(e):
            if gates[i, k] >= c:
                out[i, k] = gates[i, k] - c
                active[i, k] = 1
            else:
                out[i, k] = 0
                active[i, k] = 0


def gate_filter_bwd(real[:, ::1] gy, unsigned char[:, ::1] active,
                    real[:, ::1] ggates, real[::1] gcut):
    cdef Py_ssize_t p = gy.shape[0], e = gy.shape[1]
    cdef Py_ssize_t i, k
    cdef real s
    for i in range(p):
        s = 0
        for k in range(e):
            if active[i, k]:
                ggates[i, k] = gy[i, k]
                s = s + gy[i, k]
            else:
                ggates[i, k] = 0
        gcut[i] = -s


def importance_normalize_fwd(real[:, ::1] imp, real[:, ::1] weights, real[::1] denom):
    cdef Py_ssize_t p = imp.shape[0], e = imp.shape[1]
    cdef Py_ssize_t i, k
    cdef real s
    for i in range(p):
        s = 0
        for k in range(e):
            s = s + imp[i, k]
        denom[i] = s
        if s > 0:
            for k in range(e):
                weights[i, k] = imp[i, k] / s
        else:
            for k in range(e):
                weights[i, k] = 0


def importance_normalize_bwd(real[:, ::1] gw, real[:, ::1] weights, real[::1] denom,
                             real[:, ::1] out):
    cdef Py_ssize_t p = gw.shape[0], e = gw.shape[1]
    cdef Py_ssize_t i, k
    cdef real inner
    for i in range(p):
        if denom[i] > 0:
            inner = 0
            for k in range(e):
                inner = inner + gw[i, k] * weights[i, k]
            for k in range(e):
                out[i, k] = (gw[i, k] - inner) / denom[i]
        else:
            for k in range(e):
                out[i, k] = 0
