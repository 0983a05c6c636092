# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor, ceil

cnp.import_array()


def normal_equations(start, end, weights, lin=None):
    cdef double[:, ::1] s = np.ascontiguousarray(start, dtype=np.float64)
    cdef double[:, ::1] e = np.ascontiguousarray(end, dtype=np.float64)
    cdef double[:, ::1] p = np.ascontiguousarray(end if lin is None else lin, dtype=np.float64)
    cdef double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t n = w.shape[0]
    A_arr = np.zeros((8, 8))
    b_arr = np.zeros(8)
    cdef double[:, ::1] A = A_arr
    cdef double[::1] b = b_arr
    cdef double jx[8]
    cdef double jy[8]
    cdef double wx, wy, u, v, lu, lv, wk, ex, ey
    cdef Py_ssize_t k, i, j
    for k in range(n):
        wk = w[k]
        if wk == 0.0:
            continue
        wx = s[k, 0]
        wy = s[k, 1]
        u = e[k, 0]
        v = e[k, 1]
        lu = p[k, 0]
        lv = p[k, 1]
        jx[0] = wx; jx[1] = wy; jx[2] = 1.0; jx[3] = 0.0
        jx[4] = 0.0; jx[5] = 0.0; jx[6] = -lu * wx; jx[7] = -lu * wy
        jy[0] = 0.0; jy[1] = 0.0; jy[2] = 0.0; jy[3] = wx
        jy[4] = wy; jy[5] = 1.0; jy[6] = -lv * wx; jy[7] = -lv * wy
        ex = wx - u
        ey = wy - v
        for i in range(8):
            b[i] += wk * (jx[i] * ex + jy[i] * ey)
            for j in range(i, 8):
                A[i, j] += wk * (jx[i] * jx[j] + jy[i] * jy[j])
    for i in range(8):
        for j in range(i):
            A[i, j] = A[j, i]
    return A_arr, b_arr


def bilinear_sample(image, xs, ys, double eps=1e-6):
    cdef double[:, ::1] img = np.ascontiguousarray(image, dtype=np.float64)
    xs_arr = np.asarray(xs, dtype=np.float64)
    shape = xs_arr.shape
    cdef double[::1] X = np.ascontiguousarray(xs_arr.ravel())
    cdef double[::1] Y = np.ascontiguousarray(np.asarray(ys, dtype=np.float64).ravel())
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t h = img.shape[0]
    cdef Py_ssize_t w = img.shape[1]
    out_arr = np.empty(n)
    valid_arr = np.empty(n, dtype=np.uint8)
    cdef double[::1] out = out_arr
    cdef unsigned char[::1] valid = valid_arr
    cdef double x, y, fx, fy, top, bot
    cdef Py_ssize_t k, x0, y0, x1, y1
    for k in range(n):
        x = X[k]
        y = Y[k]
        valid[k] = (x >= -eps and x <= w - 1 + eps and y >= -eps and y <= h - 1 + eps)
        if x < 0.0:
            x = 0.0
        elif x > w - 1.0:
            x = w - 1.0
        if y < 0.0:
            y = 0.0
        elif y > h - 1.0:
            y = h - 1.0
        x0 = <Py_ssize_t>floor(x)
        y0 = <Py_ssize_t>floor(y)
        fx = x - x0
        fy = y - y0
        x1 = x0 + 1 if x0 + 1 < w else w - 1
        y1 = y0 + 1 if y0 + 1 < h else h - 1
        top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
        bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
        out[k] = top * (1.0 - fy) + bot * fy
    return out_arr.reshape(shape), valid_arr.view(np.bool_).reshape(shape)


def splat_gaussians(Py_ssize_t width, Py_ssize_t height, xs, ys, sigmas, double truncate=6.0):
    cdef double[::1] X = np.ascontiguousarray(xs, dtype=np.float64).ravel()
    cdef double[::1] Y = np.ascontiguousarray(ys, dtype=np.float64).ravel()
    cdef double[::1] S = np.ascontiguousarray(sigmas, dtype=np.float64).ravel()
    grid_arr = np.zeros((height, width))
    cdef double[:, ::1] grid = grid_arr
    gx_arr = np.empty(width)
    gy_arr = np.empty(height)
    cdef double[::1] gx = gx_arr
    cdef double[::1] gy = gy_arr
    cdef Py_ssize_t k, r, c, c0, c1, r0, r1
    cdef double x, y, s, rad, inv
    for k in range(X.shape[0]):
        x = X[k]
        y = Y[k]
        s = S[k]
        rad = truncate * s
        c0 = <Py_ssize_t>floor(x - rad)
        c1 = <Py_ssize_t>ceil(x + rad)
        r0 = <Py_ssize_t>floor(y - rad)
        r1 = <Py_ssize_t>ceil(y + rad)
        if c0 < 0:
            c0 = 0
        if r0 < 0:
            r0 = 0
        if c1 > width - 1:
            c1 = width - 1
        if r1 > height - 1:
            r1 = height - 1
        if c0 > c1 or r0 > r1:
            continue
        inv = 1.0 / (2.0 * s * s)
        for c in range(c0, c1 + 1):
            gx[c] = exp(-(c - x) * (c - x) * inv)
        for r in range(r0, r1 + 1):
            gy[r] = exp(-(r - y) * (r - y) * inv)
        for r in range(r0, r1 + 1):
            for c in range(c0, c1 + 1):
                grid[r, c] += gy[r] * gx[c]
    return grid_arr
