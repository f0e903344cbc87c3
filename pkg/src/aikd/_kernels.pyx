# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled bilinear warp. Must stay numerically in step with _kernels_py."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline void _warp_one(const double[:, :, ::1] img, const double[:, ::1] inv,
                           double[:, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], nc = img.shape[2]
    cdef Py_ssize_t oh = out.shape[0], ow = out.shape[1]
    cdef Py_ssize_t oy, ox, c, x0, y0, x1, y1
    cdef double xs, ys, fx, fy, p00, p01, p10, p11, top, bot
    cdef bint in_x0, in_x1, in_y0, in_y1
    for oy in range(oh):
        for ox in range(ow):
            xs = inv[0, 0] * ox + inv[0, 1] * oy + inv[0, 2]
            ys = inv[1, 0] * ox + inv[1, 1] * oy + inv[1, 2]
            if not (xs > -1.0 and xs < w and ys > -1.0 and ys < h):
                for c in range(nc):
                    out[oy, ox, c] = 0.0
                continue
            fx = floor(xs)
            fy = floor(ys)
            x0 = <Py_ssize_t>fx
            y0 = <Py_ssize_t>fy
            fx = xs - fx
            fy = ys - fy
            x1 = x0 + 1
            y1 = y0 + 1
            in_x0 = x0 >= 0
            in_x1 = x1 < w
            in_y0 = y0 >= 0
            in_y1 = y1 < h
            for c in range(nc):
                p00 = img[y0, x0, c] if (in_y0 and in_x0) else 0.0
                p01 = img[y0, x1, c] if (in_y0 and in_x1) else 0.0
                p10 = img[y1, x0, c] if (in_y1 and in_x0) else 0.0
                p11 = img[y1, x1, c] if (in_y1 and in_x1) else 0.0
                top = (1.0 - fx) * p00 + fx * p01
                bot = (1.0 - fx) * p10 + fx * p11
                out[oy, ox, c] = (1.0 - fy) * top + fy * bot


def warp_bilinear(img, inv, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef const double[:, :, ::1] src = np.ascontiguousarray(img, dtype=np.float64)
    cdef const double[:, ::1] m = np.ascontiguousarray(inv, dtype=np.float64)
    out = np.empty((out_h, out_w, src.shape[2]), dtype=np.float64)
    cdef double[:, :, ::1] dst = out
    with nogil:
        _warp_one(src, m, dst)
    return out


def warp_bilinear_batch(imgs, invs, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef const double[:, :, :, ::1] src = np.ascontiguousarray(imgs, dtype=np.float64)
    cdef const double[:, :, ::1] m = np.ascontiguousarray(invs, dtype=np.float64)
    cdef Py_ssize_t n = src.shape[0], i
    if m.shape[0] != n:
        raise ValueError("one inverse transform per image is required")
    out = np.empty((n, out_h, out_w, src.shape[3]), dtype=np.float64)
    cdef double[:, :, :, ::1] dst = out
    with nogil:
        for i in range(n):
            _warp_one(src[i], m[i], dst[i])
    return out
