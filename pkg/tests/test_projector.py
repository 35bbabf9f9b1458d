import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from conftest import slab_lengths
from irnct import projector
from irnct.core import (ConfigurationError, ProjectionSet, Volume, adjoint_mismatch,
                        circular_geometry)
from irnct.projector import (as_linear_map, box_min, project_adjoint, project_forward,
                             ray_profile)

BACKENDS = sorted(projector.KERNELS)


def _pixel_end(geom, a, iu, iv):
    src, det, eu = geom.frames()
    u, v = geom.detector_coords()
    return src[a], det[a] + u[iu] * eu[a] + np.array([0.0, 0.0, v[iv]])


def test_zero_volume_projects_to_zero(small_geom):
    p = project_forward(Volume((16, 16, 16)), small_geom)
    assert np.all(p.data == 0)


def test_zero_projections_backproject_to_zero(small_geom):
    v = project_adjoint(ProjectionSet(small_geom), small_geom, (16, 16, 16), (1.0, 1.0, 1.0))
    assert np.all(v.data == 0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_unit_cube_central_ray_is_chord(backend):
    g = circular_geometry(4, 50.0, 80.0, (9, 9), (1.0, 1.0))
    vol = np.ones(8 ** 3)
    p = projector.forward_raw(vol, g, (8, 8, 8), (2.0, 2.0, 2.0), backend=backend)
    central = p.reshape(4, 9, 9)[:, 4, 4]
    assert_allclose(central, 16.0, rtol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_voxel_matches_slab_oracle(backend):
    g = circular_geometry(3, 30.0, 50.0, (11, 9), (1.3, 1.1), start=0.3)
    dims, sp = (8, 8, 8), (1.0, 1.0, 1.0)
    bmin = box_min(dims, sp)
    j = 3 + 8 * (4 + 8 * 2)
    x = np.zeros(512)
    x[j] = 2.5
    p = projector.forward_raw(x, g, dims, sp, backend=backend).reshape(3, 9, 11)
    for a in range(3):
        for iv in range(9):
            for iu in range(11):
                s, e = _pixel_end(g, a, iu, iv)
                expect = 2.5 * slab_lengths(s, e, dims, sp, bmin)[j]
                assert p[a, iv, iu] == pytest.approx(expect, rel=1e-10, abs=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_adjoint_exactness(backend, small_geom):
    op = as_linear_map(small_geom, (16, 16, 16), (1.0, 1.0, 1.0), backend=backend)
    assert adjoint_mismatch(op, np.random.default_rng(7), trials=20) < 1e-6


def test_one_hot_bin_adjoint_is_ray_profile(small_geom):
    dims, sp = (16, 16, 16), (1.0, 1.0, 1.0)
    a, iu, iv = 5, 13, 9
    y = np.zeros(small_geom.n_rays)
    nu, nv = small_geom.detector_shape
    y[iu + nu * (iv + nv * a)] = 1.0
    back = projector.adjoint_raw(y, small_geom, dims, sp)
    s, e = _pixel_end(small_geom, a, iu, iv)
    assert_allclose(back, slab_lengths(s, e, dims, sp, box_min(dims, sp)), atol=1e-12)


def test_matricization_matches_slab_matrix():
    g = circular_geometry(2, 20.0, 35.0, (5, 4), (1.2, 1.2), start=0.2)
    dims, sp = (4, 4, 4), (1.0, 1.0, 1.0)
    op = as_linear_map(g, dims, sp)
    dense = op.to_dense()
    nu, nv = g.detector_shape
    oracle = np.zeros_like(dense)
    for a in range(2):
        for iv in range(nv):
            for iu in range(nu):
                s, e = _pixel_end(g, a, iu, iv)
                oracle[iu + nu * (iv + nv * a)] = slab_lengths(s, e, dims, sp, box_min(dims, sp))
    assert_allclose(dense, oracle, atol=1e-10)
    rng = np.random.default_rng(3)
    x = rng.standard_normal(64)
    y = rng.standard_normal(op.range_size)
    assert_allclose(op.apply(x), dense @ x, atol=1e-10)
    assert_allclose(op.apply_adjoint(y), dense.T @ y, atol=1e-10)


def test_linear_map_apply_equals_project_forward(small_geom, rng):
    vol = Volume((16, 16, 16), data=rng.random(16 ** 3))
    op = as_linear_map(small_geom, vol.dims, vol.spacing)
    assert_array_equal(op.apply(vol.data), project_forward(vol, small_geom).data)


def test_ray_lengths_sum_to_chord(small_geom):
    dims, sp = (16, 16, 16), (1.0, 1.0, 1.0)
    bmin = box_min(dims, sp)
    for a, iu, iv in [(0, 14, 12), (3, 2, 20), (7, 25, 1)]:
        idx, w = ray_profile(small_geom, a, iu, iv, dims, sp)
        assert np.all(w > 0)
        s, e = _pixel_end(small_geom, a, iu, iv)
        chord = slab_lengths(s, e, (1, 1, 1), (16.0, 16.0, 16.0), bmin).sum()
        assert w.sum() == pytest.approx(chord, rel=1e-9)


def test_rays_missing_volume_read_zero():
    g = circular_geometry(2, 50.0, 80.0, (40, 3), (4.0, 1.0))
    p = projector.forward_raw(np.ones(8 ** 3), g, (8, 8, 8), (1.0, 1.0, 1.0)).reshape(2, 3, 40)
    # outermost columns project well outside the 8 mm box
    assert np.all(p[:, :, :5] == 0) and np.all(p[:, :, -5:] == 0)
    assert np.all(p[:, :, 20] > 0)


def test_scaling_covariance(rng):
    x = rng.random(10 ** 3)
    g1 = circular_geometry(5, 40.0, 70.0, (16, 14), (1.3, 1.3))
    g2 = circular_geometry(5, 80.0, 140.0, (16, 14), (2.6, 2.6))
    p1 = projector.forward_raw(x, g1, (10, 10, 10), (1.0, 1.0, 1.0))
    p2 = projector.forward_raw(x, g2, (10, 10, 10), (2.0, 2.0, 2.0))
    assert_allclose(p2, 2.0 * p1, rtol=1e-9, atol=1e-12)


def test_repeated_calls_bit_identical(small_geom, rng):
    x = rng.random(16 ** 3)
    y = rng.random(small_geom.n_rays)
    dims, sp = (16, 16, 16), (1.0, 1.0, 1.0)
    assert_array_equal(projector.forward_raw(x, small_geom, dims, sp),
                       projector.forward_raw(x, small_geom, dims, sp))
    assert_array_equal(projector.adjoint_raw(y, small_geom, dims, sp),
                       projector.adjoint_raw(y, small_geom, dims, sp))


def test_source_inside_volume_is_rejected():
    g = circular_geometry(4, 5.0, 20.0, (4, 4), (1.0, 1.0))
    with pytest.raises(ConfigurationError):
        project_forward(Volume((16, 16, 16)), g)


def test_adjoint_dimension_mismatch(small_geom):
    bad = ProjectionSet(small_geom.with_angles([0.0]))
    with pytest.raises(ConfigurationError):
        project_adjoint(bad, small_geom, (16, 16, 16), (1.0, 1.0, 1.0))


@pytest.mark.skipif("compiled" not in projector.KERNELS, reason="extension not built")
def test_backends_agree(small_geom, rng):
    dims, sp = (16, 16, 16), (1.0, 1.0, 1.0)
    x = rng.standard_normal(16 ** 3)
    y = rng.standard_normal(small_geom.n_rays)
    fc = projector.forward_raw(x, small_geom, dims, sp, backend="compiled")
    fp = projector.forward_raw(x, small_geom, dims, sp, backend="python")
    assert_allclose(fc, fp, rtol=1e-10, atol=1e-10 * np.abs(fp).max())
    bc = projector.adjoint_raw(y, small_geom, dims, sp, backend="compiled")
    bp = projector.adjoint_raw(y, small_geom, dims, sp, backend="python")
    assert_allclose(bc, bp, rtol=1e-10, atol=1e-10 * np.abs(bp).max())


def test_offset_origin_shifts_projection(rng):
    # moving the volume and the detector offset together leaves a centred object centred
    g = circular_geometry(1, 60.0, 90.0, (21, 21), (1.0, 1.0))
    x = np.zeros(8 ** 3)
    x[3 + 8 * (3 + 8 * 3)] = 1.0
    base = projector.forward_raw(x, g, (8, 8, 8), (1.0, 1.0, 1.0)).reshape(21, 21)
    shifted = projector.forward_raw(x, g, (8, 8, 8), (1.0, 1.0, 1.0),
                                    origin=(0.0, 0.0, 2.0)).reshape(21, 21)
    assert base.sum() == pytest.approx(shifted.sum(), rel=0.2)
    assert np.argmax(shifted.sum(axis=1)) > np.argmax(base.sum(axis=1))
