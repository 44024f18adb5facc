# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled PatchMatch and patch-voting kernels.

Mirrors ``_pykernels`` line for line; see that module for the contract.
NNF entries are absolute source centres ``(x, y)``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline double _cost(const double[:, :, ::1] src, const double[:, :, ::1] tgt,
                         Py_ssize_t tx, Py_ssize_t ty, Py_ssize_t sx, Py_ssize_t sy,
                         Py_ssize_t r) noexcept nogil:
    cdef Py_ssize_t ht = tgt.shape[0], wt = tgt.shape[1], nc = tgt.shape[2]
    cdef Py_ssize_t dy, dx, c, yy, xx
    cdef double acc = 0.0, d
    for dy in range(-r, r + 1):
        yy = ty + dy
        if yy < 0 or yy >= ht:
            continue
        for dx in range(-r, r + 1):
            xx = tx + dx
            if xx < 0 or xx >= wt:
                continue
            for c in range(nc):
                d = tgt[yy, xx, c] - src[sy + dy, sx + dx, c]
                acc += d * d
    return acc


def patch_cost(const double[:, :, ::1] src, const double[:, :, ::1] tgt,
               Py_ssize_t tx, Py_ssize_t ty, Py_ssize_t sx, Py_ssize_t sy, Py_ssize_t r):
    return _cost(src, tgt, tx, ty, sx, sy, r)


def compute_costs(const double[:, :, ::1] src, const double[:, :, ::1] tgt,
                  const cnp.int64_t[:, :, ::1] nnf, Py_ssize_t r):
    cdef Py_ssize_t ht = tgt.shape[0], wt = tgt.shape[1], x, y
    out = np.empty((ht, wt), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for y in range(ht):
            for x in range(wt):
                o[y, x] = _cost(src, tgt, x, y, nnf[y, x, 0], nnf[y, x, 1], r)
    return out


cdef inline void _try(const double[:, :, ::1] src, const double[:, :, ::1] tgt,
                      cnp.int64_t[:, :, ::1] nnf, double[:, ::1] cost,
                      Py_ssize_t x, Py_ssize_t y, Py_ssize_t cx, Py_ssize_t cy,
                      Py_ssize_t r) noexcept nogil:
    cdef double c
    if cx == nnf[y, x, 0] and cy == nnf[y, x, 1]:
        return
    c = _cost(src, tgt, x, y, cx, cy, r)
    if c < cost[y, x]:
        cost[y, x] = c
        nnf[y, x, 0] = cx
        nnf[y, x, 1] = cy


cdef inline Py_ssize_t _lo(Py_ssize_t t, Py_ssize_t r) noexcept nogil:
    return t if t < r else r


cdef inline Py_ssize_t _hi(Py_ssize_t t, Py_ssize_t nt, Py_ssize_t ns, Py_ssize_t r) noexcept nogil:
    cdef Py_ssize_t m = nt - 1 - t
    return ns - 1 - (m if m < r else r)


def pm_iteration(const double[:, :, ::1] src, const double[:, :, ::1] tgt,
                 cnp.int64_t[:, :, ::1] nnf, double[:, ::1] cost, Py_ssize_t r,
                 bint reverse, const double[:, :, :, ::1] rand):
    cdef Py_ssize_t ht = tgt.shape[0], wt = tgt.shape[1]
    cdef Py_ssize_t hs = src.shape[0], ws = src.shape[1]
    cdef Py_ssize_t lo_x, hi_x, lo_y, hi_y
    cdef Py_ssize_t nrad = rand.shape[2]
    cdef Py_ssize_t i, j, x, y, step, cx, cy, k, rad, a, b
    cdef double radius, rad0 = <double>(ws if ws > hs else hs)
    step = -1 if reverse else 1
    with nogil:
        for i in range(ht):
            y = ht - 1 - i if reverse else i
            for j in range(wt):
                x = wt - 1 - j if reverse else j
                lo_x = _lo(x, r)
                hi_x = _hi(x, wt, ws, r)
                lo_y = _lo(y, r)
                hi_y = _hi(y, ht, hs, r)
                # propagation from the already-visited horizontal and vertical neighbours
                if 0 <= x - step < wt:
                    cx = nnf[y, x - step, 0] + step
                    cy = nnf[y, x - step, 1]
                    if lo_x <= cx <= hi_x and lo_y <= cy <= hi_y:
                        _try(src, tgt, nnf, cost, x, y, cx, cy, r)
                if 0 <= y - step < ht:
                    cx = nnf[y - step, x, 0]
                    cy = nnf[y - step, x, 1] + step
                    if lo_x <= cx <= hi_x and lo_y <= cy <= hi_y:
                        _try(src, tgt, nnf, cost, x, y, cx, cy, r)
                # random search: uniform draw in the clipped window, radius halving
                radius = rad0
                k = 0
                while radius >= 1.0 and k < nrad:
                    rad = <Py_ssize_t>radius
                    a = nnf[y, x, 0] - rad
                    b = nnf[y, x, 0] + rad
                    a = lo_x if a < lo_x else a
                    b = hi_x if b > hi_x else b
                    cx = a + <Py_ssize_t>floor(rand[y, x, k, 0] * (b - a + 1))
                    a = nnf[y, x, 1] - rad
                    b = nnf[y, x, 1] + rad
                    a = lo_y if a < lo_y else a
                    b = hi_y if b > hi_y else b
                    cy = a + <Py_ssize_t>floor(rand[y, x, k, 1] * (b - a + 1))
                    _try(src, tgt, nnf, cost, x, y, cx, cy, r)
                    radius *= 0.5
                    k += 1


def vote(const double[:, :, ::1] image, const cnp.int64_t[:, :, ::1] nnf, Py_ssize_t r):
    """Deviations from each pixel's centre vote, summed, and vote counts."""
    cdef Py_ssize_t ht = nnf.shape[0], wt = nnf.shape[1]
    cdef Py_ssize_t hs = image.shape[0], ws = image.shape[1], nc = image.shape[2]
    cdef Py_ssize_t x, y, dx, dy, sx, sy, px, py, c
    acc = np.zeros((ht, wt, nc), dtype=np.float64)
    cnt = np.zeros((ht, wt), dtype=np.float64)
    cdef double[:, :, ::1] a = acc
    cdef double[:, ::1] n = cnt
    with nogil:
        for y in range(ht):
            for x in range(wt):
                for dy in range(-r, r + 1):
                    py = y + dy
                    sy = nnf[y, x, 1] + dy
                    if py < 0 or py >= ht or sy < 0 or sy >= hs:
                        continue
                    for dx in range(-r, r + 1):
                        px = x + dx
                        sx = nnf[y, x, 0] + dx
                        if px < 0 or px >= wt or sx < 0 or sx >= ws:
                            continue
                        for c in range(nc):
                            a[py, px, c] += image[sy, sx, c] - image[nnf[py, px, 1], nnf[py, px, 0], c]
                        n[py, px] += 1.0
    return acc, cnt
