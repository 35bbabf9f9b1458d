"""Feldkamp-Davis-Kress reconstruction for circular flat-detector scans."""

from __future__ import annotations

import numpy as np

from .core import ConeBeamGeometry, ConfigurationError, ProjectionSet, Volume

FILTERS = ("ram-lak", "shepp-logan", "cosine", "hann")


def ramp_kernel(n_pad: int, pitch: float, kind: str = "ram-lak") -> np.ndarray:
    """Frequency response of the band-limited ramp filter on ``n_pad`` samples.

    Built from the spatial Ram-Lak kernel so the DC term is correct for a
    finite detector, then apodised by ``kind``.
    """
    if kind not in FILTERS:
        raise ConfigurationError(f"unknown filter {kind!r}; choose from {FILTERS}")
    n = np.concatenate([np.arange(0, n_pad // 2 + 1), np.arange(-(n_pad // 2) + 1, 0)])
    h = np.zeros(n_pad)
    h[0] = 1.0 / (4.0 * pitch * pitch)
    odd = (n % 2) == 1
    h[odd] = -1.0 / (np.pi * n[odd] * pitch) ** 2
    resp = np.real(np.fft.rfft(h)) * pitch
    w = np.pi * np.fft.rfftfreq(n_pad) * 2.0  # 0..pi
    if kind == "shepp-logan":
        resp[1:] *= np.sin(w[1:] / 2.0) / (w[1:] / 2.0)
    elif kind == "cosine":
        resp *= np.cos(w / 2.0)
    elif kind == "hann":
        resp *= 0.5 * (1.0 + np.cos(w))
    return resp


def filter_projections(proj: ProjectionSet, kind: str = "ram-lak") -> np.ndarray:
    """Cosine-weight and ramp-filter each detector row.

    Works on the virtual detector through the isocentre; returns an
    ``(n_angles, nv, nu)`` array.
    """
    g = proj.geometry
    mag = g.dso / g.dsd
    u, v = g.detector_coords()
    us, vs = u * mag, v * mag
    pitch = g.pixel_pitch[0] * mag
    weight = g.dso / np.sqrt(g.dso ** 2 + us[None, :] ** 2 + vs[:, None] ** 2)
    p = proj.as_array() * weight[None, :, :]
    nu = g.detector_shape[0]
    n_pad = int(2 ** np.ceil(np.log2(max(64, 2 * nu))))
    resp = ramp_kernel(n_pad, pitch, kind)
    spec = np.fft.rfft(p, n=n_pad, axis=2)
    return np.fft.irfft(spec * resp, n=n_pad, axis=2)[:, :, :nu]


def _bilinear(img, fi, fj):
    nv, nu = img.shape
    i0 = np.floor(fi).astype(np.int64)
    j0 = np.floor(fj).astype(np.int64)
    di, dj = fi - i0, fj - j0
    out = np.zeros(fi.shape)
    for oi, oj, w in ((0, 0, (1 - di) * (1 - dj)), (1, 0, di * (1 - dj)),
                      (0, 1, (1 - di) * dj), (1, 1, di * dj)):
        ii, jj = i0 + oi, j0 + oj
        ok = (ii >= 0) & (ii < nu) & (jj >= 0) & (jj < nv)
        out[ok] += w[ok] * img[jj[ok], ii[ok]]
    return out


def fdk(proj: ProjectionSet, geom: ConeBeamGeometry, dims, spacing,
        filter_kind: str = "ram-lak", origin=(0.0, 0.0, 0.0)) -> Volume:
    """Cosine-weighted, ramp-filtered, distance-weighted backprojection.

    Each view carries weight ``pi / n_angles``, which is exact for uniformly
    spaced full-circle scans.
    """
    if geom.n_angles < 2:
        raise ConfigurationError("FDK needs at least two projection angles")
    if proj.size != geom.n_rays:
        raise ConfigurationError("projection data does not match geometry")
    if proj.geometry is not geom:
        proj = ProjectionSet(geom, proj.data)
    q = filter_projections(proj, filter_kind)

    nx, ny, nz = (int(n) for n in dims)
    sx, sy, sz = (float(s) for s in spacing)
    xs = origin[0] + (np.arange(nx) - (nx - 1) / 2.0) * sx
    ys = origin[1] + (np.arange(ny) - (ny - 1) / 2.0) * sy
    zs = origin[2] + (np.arange(nz) - (nz - 1) / 2.0) * sz
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    nu, nv = geom.detector_shape
    pu, pv = geom.pixel_pitch
    ou, ov = geom.offset
    out = np.zeros((nz, ny, nx))
    for a, beta in enumerate(geom.angles):
        c, s = np.cos(beta), np.sin(beta)
        t = geom.dso - (xx * c + yy * s)
        mag = geom.dsd / t
        fi = ((-xx * s + yy * c) * mag - ou) / pu + (nu - 1) / 2.0
        fj = (zs[:, None, None] * mag[None] - ov) / pv + (nv - 1) / 2.0
        val = _bilinear(q[a], np.broadcast_to(fi, fj.shape), fj)
        out += val * (geom.dso / t) ** 2
    out *= np.pi / geom.n_angles
    return Volume((nx, ny, nz), (sx, sy, sz), tuple(origin), out.ravel())
