# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Siddon ray tracer: forward projection and its matched adjoint.

Rays are walked incrementally across the x/y/z plane families; a voxel's
weight is the exact chord length of the ray inside it. The adjoint reuses the
same traversal, so the pair is exact up to floating-point rounding.

The forward pass parallelises over rays (each writes its own detector bin).
The adjoint parallelises over views into per-thread buffers that are summed in
thread order, so results are bit-reproducible for a fixed thread count.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange, threadid
from libc.math cimport sqrt, floor, ceil, INFINITY

cnp.import_array()


cdef inline double _plane_alpha(double b, int k, double sp, double s, double d) noexcept nogil:
    return (b + k * sp - s) / d


cdef inline int _first_plane(double b, double sp, int n, double s, double d,
                             double a_min, double* a_next) noexcept nogil:
    # index of the first plane crossed strictly after a_min
    cdef int k
    if d > 0:
        k = <int>floor((s + a_min * d - b) / sp) + 1
        if k < 0:
            k = 0
        if k > n + 1:
            k = n + 1
        while k > 0 and _plane_alpha(b, k - 1, sp, s, d) > a_min:
            k -= 1
        while k <= n and _plane_alpha(b, k, sp, s, d) <= a_min:
            k += 1
        a_next[0] = _plane_alpha(b, k, sp, s, d) if k <= n else INFINITY
    else:
        k = <int>ceil((s + a_min * d - b) / sp) - 1
        if k > n:
            k = n
        if k < -1:
            k = -1
        while k < n and _plane_alpha(b, k + 1, sp, s, d) > a_min:
            k += 1
        while k >= 0 and _plane_alpha(b, k, sp, s, d) <= a_min:
            k -= 1
        a_next[0] = _plane_alpha(b, k, sp, s, d) if k >= 0 else INFINITY
    return k


cdef inline int _voxel(double s, double a, double d, double b, double inv, int n) noexcept nogil:
    cdef int i = <int>floor((s + a * d - b) * inv)
    if i < 0:
        return 0
    if i >= n:
        return n - 1
    return i


cdef double _trace(const double* vol, double* out, double val, bint scatter,
                   double* s, double* d, int* n, double* sp, double* b) noexcept nogil:
    cdef double a_min = 0.0, a_max = 1.0
    cdef double lo, hi, t0, t1, ray_len, a_cur, a_n, seg, mid, acc = 0.0
    cdef double nxt[3]
    cdef double inv[3]
    cdef int k[3]
    cdef int step[3]
    cdef int idx[3]
    cdef int ax

    for ax in range(3):
        inv[ax] = 1.0 / sp[ax]
        if d[ax] != 0:
            t0 = (b[ax] - s[ax]) / d[ax]
            t1 = (b[ax] + n[ax] * sp[ax] - s[ax]) / d[ax]
            lo = t0 if t0 < t1 else t1
            hi = t1 if t0 < t1 else t0
            if lo > a_min:
                a_min = lo
            if hi < a_max:
                a_max = hi
        elif not (b[ax] < s[ax] < b[ax] + n[ax] * sp[ax]):
            return 0.0
    if a_max <= a_min:
        return 0.0

    ray_len = sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    for ax in range(3):
        if d[ax] != 0:
            k[ax] = _first_plane(b[ax], sp[ax], n[ax], s[ax], d[ax], a_min, &nxt[ax])
            step[ax] = 1 if d[ax] > 0 else -1
        else:
            k[ax] = 0
            step[ax] = 0
            nxt[ax] = INFINITY

    a_n = a_max
    for ax in range(3):
        if nxt[ax] < a_n:
            a_n = nxt[ax]
    mid = 0.5 * (a_min + a_n)
    for ax in range(3):
        idx[ax] = _voxel(s[ax], mid, d[ax], b[ax], inv[ax], n[ax])

    a_cur = a_min
    while True:
        a_n = a_max
        for ax in range(3):
            if nxt[ax] < a_n:
                a_n = nxt[ax]
        seg = a_n - a_cur
        if seg > 0:
            if scatter:
                out[idx[0] + n[0] * (idx[1] + n[1] * idx[2])] += val * seg * ray_len
            else:
                acc = acc + vol[idx[0] + n[0] * (idx[1] + n[1] * idx[2])] * seg * ray_len
        if a_n >= a_max:
            break
        a_cur = a_n
        for ax in range(3):
            if nxt[ax] == a_n:
                idx[ax] += step[ax]
                k[ax] += step[ax]
                if 0 <= k[ax] <= n[ax]:
                    nxt[ax] = _plane_alpha(b[ax], k[ax], sp[ax], s[ax], d[ax])
                else:
                    nxt[ax] = INFINITY
        if (idx[0] < 0 or idx[0] >= n[0] or idx[1] < 0 or idx[1] >= n[1]
                or idx[2] < 0 or idx[2] >= n[2]):
            break
    return acc


def forward(const double[::1] vol, dims, spacing, bmin,
            const double[:, ::1] src, const double[:, ::1] det, const double[:, ::1] eu,
            const double[::1] u, const double[::1] v, int num_threads=1):
    cdef int nu = u.shape[0], nv = v.shape[0], n_views = src.shape[0]
    cdef Py_ssize_t n_rays = <Py_ssize_t>nu * nv * n_views
    cdef int n[3]
    cdef double sp[3]
    cdef double b[3]
    cdef Py_ssize_t r
    cdef int a, i, j, ax
    cdef double s[3]
    cdef double d[3]
    for ax in range(3):
        n[ax] = dims[ax]
        sp[ax] = spacing[ax]
        b[ax] = bmin[ax]
    out = np.zeros(n_rays)
    cdef double[::1] out_v = out
    for r in prange(n_rays, nogil=True, schedule="static", num_threads=num_threads):
        a = r // (nu * nv)
        j = (r // nu) % nv
        i = r % nu
        _ray_into(&vol[0], &out_v[r], &src[a, 0], &det[a, 0], &eu[a, 0], u[i], v[j], n, sp, b)
    return out


cdef inline void _ray_into(const double* vol, double* dst, const double* src, const double* det,
                           const double* eu, double uu, double vv,
                           int* n, double* sp, double* b) noexcept nogil:
    cdef double s[3]
    cdef double d[3]
    cdef int ax
    for ax in range(3):
        s[ax] = src[ax]
    d[0] = det[0] + uu * eu[0] - src[0]
    d[1] = det[1] + uu * eu[1] - src[1]
    d[2] = det[2] + vv - src[2]
    dst[0] = _trace(vol, NULL, 0.0, False, s, d, n, sp, b)


def adjoint(const double[::1] proj, dims, spacing, bmin,
            const double[:, ::1] src, const double[:, ::1] det, const double[:, ::1] eu,
            const double[::1] u, const double[::1] v, int num_threads=1):
    cdef int nu = u.shape[0], nv = v.shape[0], n_views = src.shape[0]
    cdef int n[3]
    cdef double sp[3]
    cdef double b[3]
    cdef int a, i, j, ax, tid
    cdef Py_ssize_t m, nray = <Py_ssize_t>nu * nv
    for ax in range(3):
        n[ax] = dims[ax]
        sp[ax] = spacing[ax]
        b[ax] = bmin[ax]
    m = <Py_ssize_t>n[0] * n[1] * n[2]
    if num_threads < 1:
        num_threads = 1
    if num_threads > n_views:
        num_threads = n_views
    bufs = np.zeros((num_threads, m))
    cdef double[:, ::1] buf = bufs
    for a in prange(n_views, nogil=True, schedule="static", num_threads=num_threads):
        tid = threadid()
        _scatter_view(&proj[a * nray], &buf[tid, 0], &src[a, 0], &det[a, 0], &eu[a, 0],
                      &u[0], &v[0], nu, nv, n, sp, b)
    if num_threads == 1:
        return bufs[0]
    out = bufs[0].copy()
    for tid in range(1, num_threads):
        out += bufs[tid]
    return out


cdef void _scatter_view(const double* y, double* out, const double* src, const double* det,
                        const double* eu, const double* u, const double* v, int nu, int nv,
                        int* n, double* sp, double* b) noexcept nogil:
    cdef double s[3]
    cdef double d[3]
    cdef int i, j, ax
    for ax in range(3):
        s[ax] = src[ax]
    for j in range(nv):
        for i in range(nu):
            if y[i + nu * j] == 0:
                continue
            d[0] = det[0] + u[i] * eu[0] - src[0]
            d[1] = det[1] + u[i] * eu[1] - src[1]
            d[2] = det[2] + v[j] - src[2]
            _trace(NULL, out, y[i + nu * j], True, s, d, n, sp, b)
