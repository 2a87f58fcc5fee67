# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for projection, backprojection and im2col/col2im.

Each function mirrors one in ``_fallback.py`` and must return the same values
up to floating point reassociation.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline double _bilinear(const double[:, ::1] img, Py_ssize_t n, double fi, double fj) noexcept nogil:
    cdef Py_ssize_t i0, j0
    cdef double di, dj, v = 0.0
    if fi <= -1.0 or fj <= -1.0 or fi >= n or fj >= n:
        return 0.0
    i0 = <Py_ssize_t>floor(fi)
    j0 = <Py_ssize_t>floor(fj)
    di = fi - i0
    dj = fj - j0
    if i0 >= 0 and j0 >= 0:
        v += (1.0 - di) * (1.0 - dj) * img[i0, j0]
    if i0 >= 0 and j0 + 1 < n:
        v += (1.0 - di) * dj * img[i0, j0 + 1]
    if i0 + 1 < n and j0 >= 0:
        v += di * (1.0 - dj) * img[i0 + 1, j0]
    if i0 + 1 < n and j0 + 1 < n:
        v += di * dj * img[i0 + 1, j0 + 1]
    return v


def project(const double[:, ::1] image, const double[::1] cos_t, const double[::1] sin_t,
            Py_ssize_t n_det, double step):
    cdef Py_ssize_t n = image.shape[0]
    cdef Py_ssize_t n_views = cos_t.shape[0]
    cdef double c = (n - 1) / 2.0
    cdef double cd = (n_det - 1) / 2.0
    cdef double radius = n * 0.7071067811865476 + 1.0
    cdef Py_ssize_t n_samp = <Py_ssize_t>(2.0 * radius / step) + 1
    cdef double t0 = -(n_samp - 1) * step / 2.0
    out = np.zeros((n_views, n_det), dtype=np.float64)
    cdef double[:, ::1] sino = out
    cdef Py_ssize_t v, k, m
    cdef double s, t, ct, st, acc
    with nogil:
        for v in range(n_views):
            ct = cos_t[v]
            st = sin_t[v]
            for k in range(n_det):
                s = k - cd
                acc = 0.0
                for m in range(n_samp):
                    t = t0 + m * step
                    acc = acc + _bilinear(image, n, s * st + t * ct + c, s * ct - t * st + c)
                sino[v, k] = acc * step
    return out


def backproject(const double[:, ::1] filtered, const double[::1] cos_t, const double[::1] sin_t,
                Py_ssize_t n):
    cdef Py_ssize_t n_views = filtered.shape[0]
    cdef Py_ssize_t n_det = filtered.shape[1]
    cdef double c = (n - 1) / 2.0
    cdef double cd = (n_det - 1) / 2.0
    out = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] img = out
    cdef Py_ssize_t v, i, j, k0
    cdef double x, y, pos, frac, ct, st, a, b
    with nogil:
        for v in range(n_views):
            ct = cos_t[v]
            st = sin_t[v]
            for i in range(n):
                y = i - c
                for j in range(n):
                    x = j - c
                    pos = x * ct + y * st + cd
                    if pos <= -1.0 or pos >= n_det:
                        continue
                    k0 = <Py_ssize_t>floor(pos)
                    frac = pos - k0
                    a = filtered[v, k0] if k0 >= 0 else 0.0
                    b = filtered[v, k0 + 1] if k0 + 1 < n_det else 0.0
                    img[i, j] += (1.0 - frac) * a + frac * b
    return out


def im2col(const double[:, :, :, ::1] xp, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t nb = xp.shape[0], nc = xp.shape[1], hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t ho = (hp - k) // stride + 1
    cdef Py_ssize_t wo = (wp - k) // stride + 1
    out = np.empty((nb, nc * k * k, ho * wo), dtype=np.float64)
    cdef double[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, di, dj, oi, oj, row
    with nogil:
        for b in range(nb):
            for ch in range(nc):
                for di in range(k):
                    for dj in range(k):
                        row = (ch * k + di) * k + dj
                        for oi in range(ho):
                            for oj in range(wo):
                                cols[b, row, oi * wo + oj] = xp[b, ch, oi * stride + di, oj * stride + dj]
    return out


def col2im(const double[:, :, ::1] cols, Py_ssize_t nc, Py_ssize_t hp, Py_ssize_t wp,
           Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t nb = cols.shape[0]
    cdef Py_ssize_t ho = (hp - k) // stride + 1
    cdef Py_ssize_t wo = (wp - k) // stride + 1
    out = np.zeros((nb, nc, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] xp = out
    cdef Py_ssize_t b, ch, di, dj, oi, oj, row
    with nogil:
        for b in range(nb):
            for ch in range(nc):
                for di in range(k):
                    for dj in range(k):
                        row = (ch * k + di) * k + dj
                        for oi in range(ho):
                            for oj in range(wo):
                                xp[b, ch, oi * stride + di, oj * stride + dj] += cols[b, row, oi * wo + oj]
    return out
