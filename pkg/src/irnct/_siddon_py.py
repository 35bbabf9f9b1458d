"""Pure numpy Siddon ray tracer, used when the compiled core is unavailable.

Each view is handled as one batch: every plane crossing of every ray is
computed, clipped to the ray's box entry/exit, sorted, and the segment
midpoints select voxels. The compiled kernel walks the same crossings
incrementally, so both produce the same intersection lengths up to rounding.
"""

import numpy as np


def _view_segments(src, det, eu, u, v, dims, spacing, bmin):
    """Voxel indices and intersection lengths (mm) for all rays of one view.

    Returns ``(idx, length)`` arrays of shape ``(n_rays, n_segments)``; padded
    segments have zero length and a valid dummy index.
    """
    nx, ny, nz = dims
    uu, vv = np.meshgrid(u, v)
    pts = (det[None, :] + uu.reshape(-1, 1) * eu[None, :]
           + vv.reshape(-1, 1) * np.array([0.0, 0.0, 1.0])[None, :])
    d = pts - src[None, :]
    n_rays = d.shape[0]
    ray_len = np.sqrt(np.sum(d * d, axis=1))

    a_min = np.zeros(n_rays)
    a_max = np.ones(n_rays)
    plane_alphas = []
    with np.errstate(divide="ignore", invalid="ignore"):
        for ax, n in enumerate((nx, ny, nz)):
            lo_b = bmin[ax]
            hi_b = bmin[ax] + n * spacing[ax]
            planes = bmin[ax] + np.arange(n + 1) * spacing[ax]
            dax = d[:, ax]
            moving = dax != 0
            alpha = (planes[None, :] - src[ax]) / dax[:, None]
            first = (lo_b - src[ax]) / dax
            last = (hi_b - src[ax]) / dax
            lo = np.where(moving, np.minimum(first, last), -np.inf)
            hi = np.where(moving, np.maximum(first, last), np.inf)
            if not (lo_b < src[ax] < hi_b):
                # parallel rays outside the slab miss the box
                lo = np.where(moving, lo, np.inf)
            a_min = np.maximum(a_min, lo)
            a_max = np.minimum(a_max, hi)
            plane_alphas.append(np.where(moving[:, None], alpha, np.nan))

    hit = a_max > a_min
    a_min = np.where(hit, a_min, 0.0)
    a_max = np.where(hit, a_max, 0.0)
    alphas = np.concatenate([a_min[:, None], a_max[:, None]] + plane_alphas, axis=1)
    alphas = np.where(np.isnan(alphas), a_min[:, None], alphas)
    alphas = np.clip(alphas, a_min[:, None], a_max[:, None])
    alphas.sort(axis=1)

    seg = np.diff(alphas, axis=1)
    mid = 0.5 * (alphas[:, :-1] + alphas[:, 1:])
    idx = np.zeros(seg.shape, dtype=np.int64)
    stride = 1
    for ax, n in enumerate((nx, ny, nz)):
        pos = (src[ax] + mid * d[:, ax, None] - bmin[ax]) * (1.0 / spacing[ax])
        i = np.clip(np.floor(pos), 0, n - 1).astype(np.int64)
        idx += i * stride
        stride *= n
    return idx, seg * ray_len[:, None]


def forward(vol, dims, spacing, bmin, src, det, eu, u, v, num_threads=1):
    n_views = src.shape[0]
    nray = u.size * v.size
    out = np.empty(n_views * nray)
    for a in range(n_views):
        idx, w = _view_segments(src[a], det[a], eu[a], u, v, dims, spacing, bmin)
        out[a * nray:(a + 1) * nray] = np.sum(vol[idx] * w, axis=1)
    return out


def adjoint(proj, dims, spacing, bmin, src, det, eu, u, v, num_threads=1):
    n_views = src.shape[0]
    nray = u.size * v.size
    m = dims[0] * dims[1] * dims[2]
    out = np.zeros(m)
    for a in range(n_views):
        idx, w = _view_segments(src[a], det[a], eu[a], u, v, dims, spacing, bmin)
        y = proj[a * nray:(a + 1) * nray]
        out += np.bincount(idx.ravel(), weights=(w * y[:, None]).ravel(), minlength=m)
    return out


def ray_segments(src, end, dims, spacing, bmin):
    """Intersection profile of a single ray ``src -> end``.

    Returns ``(idx, length)`` with zero-length segments dropped, in traversal
    order.
    """
    src = np.asarray(src, dtype=float)
    end = np.asarray(end, dtype=float)
    # one "detector pixel" at ``end``: u = v = 0, eu arbitrary
    idx, w = _view_segments(src, end, np.array([1.0, 0.0, 0.0]), np.zeros(1),
                            np.zeros(1), dims, spacing, bmin)
    keep = w[0] > 0
    return idx[0][keep], w[0][keep]
