import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from irnct import diffreg
from irnct.core import ConfigurationError, Volume, adjoint_mismatch
from irnct.diffreg import (DiffOperator, apply_D, piccs_weights, smoothed_l1_weights,
                           tv, tv_weights)


def d1(n):
    m = np.eye(n) - np.eye(n, k=1)
    m[-1] = 0.0
    return m


def kron_D(nx, ny, nz):
    """Stacked padded-difference matrix for x-fastest vectorisation."""
    Ix, Iy, Iz = np.eye(nx), np.eye(ny), np.eye(nz)
    Dx = np.kron(Iz, np.kron(Iy, d1(nx)))
    Dy = np.kron(Iz, np.kron(d1(ny), Ix))
    Dz = np.kron(d1(nz), np.kron(Iy, Ix))
    return np.vstack([Dx, Dy, Dz])


def test_constant_volume_has_zero_gradient():
    v = Volume((5, 4, 3), data=np.full(60, 3.7))
    assert np.all(apply_D(v) == 0)


def test_ramp_along_x():
    nx, ny, nz = 6, 3, 2
    arr = np.broadcast_to(np.arange(nx, dtype=float), (nz, ny, nx))
    g = apply_D(Volume.from_array(arr)).reshape(3, nz, ny, nx)
    assert_array_equal(g[0, :, :, :-1], -1.0)
    assert_array_equal(g[0, :, :, -1], 0.0)
    assert np.all(g[1] == 0) and np.all(g[2] == 0)


@pytest.mark.parametrize("dims", [(3, 3, 3), (3, 4, 5)])
def test_matches_kronecker_matrix(dims):
    D = DiffOperator(dims)
    assert_allclose(D.to_dense(), kron_D(*dims), atol=0)
    rng = np.random.default_rng(0)
    y = rng.standard_normal(D.range_size)
    assert_allclose(D.apply_adjoint(y), kron_D(*dims).T @ y, rtol=1e-13, atol=1e-13)


def test_diff_operator_adjoint():
    assert adjoint_mismatch(DiffOperator((16, 16, 16)), np.random.default_rng(5)) < 1e-10


def test_null_space_is_constants():
    D = DiffOperator((3, 3, 3)).to_dense()
    assert np.linalg.matrix_rank(D) == 26
    assert np.all(D @ np.ones(27) == 0)


def test_tv_constant_is_zero():
    assert tv(Volume((4, 4, 4), data=np.full(64, 2.0))) == 0.0


@pytest.mark.parametrize("k", [1, 3, 5])
def test_tv_of_unit_step(k):
    nx, step = 7, 4
    arr = np.zeros((k, k, nx))
    arr[:, :, step:] = 1.0
    vol = Volume.from_array(arr)
    # direct summation: one unit jump between columns step-1 and step per (y, z) line
    expected = 0.0
    for iz in range(k):
        for iy in range(k):
            for ix in range(nx - 1):
                expected += abs(arr[iz, iy, ix] - arr[iz, iy, ix + 1])
    assert expected == k * k
    assert tv(vol) == pytest.approx(expected, rel=1e-14)


def test_tv_homogeneity(rng):
    x = rng.standard_normal(6 * 5 * 4)
    v = Volume((6, 5, 4), data=x)
    assert tv(v.with_data(-2.5 * x)) == pytest.approx(2.5 * tv(v), rel=1e-12)


def test_tv_matches_direct_formula(rng):
    arr = rng.standard_normal((4, 5, 6))
    total = 0.0
    nz, ny, nx = arr.shape
    for iz in range(nz):
        for iy in range(ny):
            for ix in range(nx):
                gx = arr[iz, iy, ix] - arr[iz, iy, ix + 1] if ix + 1 < nx else 0.0
                gy = arr[iz, iy, ix] - arr[iz, iy + 1, ix] if iy + 1 < ny else 0.0
                gz = arr[iz, iy, ix] - arr[iz + 1, iy, ix] if iz + 1 < nz else 0.0
                total += np.sqrt(gx * gx + gy * gy + gz * gz)
    assert tv(Volume.from_array(arr)) == pytest.approx(total, rel=1e-12)


def test_smoothed_weights_at_zero():
    assert_allclose(smoothed_l1_weights(np.zeros(5), 1e-2), 10.0, rtol=1e-12)


def test_weights_reject_nonpositive_tau():
    with pytest.raises(ConfigurationError):
        smoothed_l1_weights(np.ones(3), 0.0)
    with pytest.raises(ConfigurationError):
        tv_weights(Volume((2, 2, 2)), -1.0)


def test_l1_as_weighted_l2_identity(rng):
    z = rng.standard_normal(500)
    z[np.abs(z) < 1e-3] = 0.5
    w = smoothed_l1_weights(z, 1e-12)
    assert np.sum((w * z) ** 2) == pytest.approx(np.sum(np.abs(z)), rel=1e-10)


def test_smoothed_l1_bound(rng):
    z = rng.standard_normal(400)
    tau = 1e-3
    w = smoothed_l1_weights(z, tau)
    val = float(np.sum((w * z) ** 2))
    # direct evaluation term by term
    direct = sum(zi * zi / np.sqrt(zi * zi + tau * tau) for zi in z)
    assert val == pytest.approx(direct, rel=1e-12)
    assert val <= np.sum(np.abs(z)) + z.size * tau


def test_tv_weights_constant_volume():
    w = tv_weights(Volume((3, 3, 3), data=np.full(27, 5.0)), 1e-2)
    assert_allclose(w.w, 1e-2 ** -0.5, rtol=1e-12)
    assert w.diagonal.size == 81


def test_weighted_norm_recovers_tv(rng):
    v = Volume((6, 6, 6), data=rng.standard_normal(216))
    w = tv_weights(v, 1e-12)
    wd = w.diagonal * apply_D(v)
    assert float(np.sum(wd * wd)) == pytest.approx(tv(v), rel=1e-9)


def test_tv_weights_shift_invariant(rng):
    x = rng.standard_normal(125)
    v = Volume((5, 5, 5), data=x)
    assert_allclose(tv_weights(v, 1e-3).w, tv_weights(v.with_data(x + 7.0), 1e-3).w,
                    rtol=1e-9)


def test_tv_weights_bounded_and_replicated(rng):
    v = Volume((5, 5, 5), data=rng.standard_normal(125))
    w = tv_weights(v, 0.05)
    assert np.all(w.w > 0) and np.all(w.w <= 0.05 ** -0.5)
    blocks = w.diagonal.reshape(3, -1)
    assert_array_equal(blocks[0], blocks[1])
    assert_array_equal(blocks[0], blocks[2])


def test_piccs_weights_equal_volumes():
    v = Volume((4, 4, 4), data=np.arange(64.0))
    _, w2 = piccs_weights(v, v, 1e-2)
    assert_allclose(w2.w, 10.0, rtol=1e-12)


def test_piccs_weights_zero_prior(rng):
    v = Volume((4, 4, 4), data=rng.standard_normal(64))
    w1, w2 = piccs_weights(v, Volume((4, 4, 4)), 1e-3)
    assert_array_equal(w1.w, w2.w)


def test_piccs_weights_match_difference_weights(rng):
    v = Volume((5, 4, 3), data=rng.standard_normal(60))
    p = Volume((5, 4, 3), data=rng.standard_normal(60))
    _, w2 = piccs_weights(v, p, 1e-3)
    ref = tv_weights(v.with_data(v.data - p.data), 1e-3)
    assert_allclose(w2.w, ref.w, rtol=1e-12)


def test_piccs_weights_dims_mismatch():
    with pytest.raises(ConfigurationError):
        piccs_weights(Volume((2, 2, 2)), Volume((2, 2, 3)), 1e-3)


def _phi(z, tau):
    return float(np.sum(np.sqrt(z * z + tau * tau)))


def _majorant(z, zstar, tau):
    s = np.sqrt(zstar * zstar + tau * tau)
    w = smoothed_l1_weights(zstar, tau)
    return 0.5 * float(np.sum((w * z) ** 2)) + 0.5 * float(np.sum(s + tau * tau / s))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-4, 1.0))
def test_tangent_majorant(seed, tau):
    r = np.random.default_rng(seed)
    z = r.standard_normal(30)
    zstar = r.standard_normal(30)
    assert _phi(z, tau) <= _majorant(z, zstar, tau) * (1 + 1e-12)
    assert _phi(zstar, tau) == pytest.approx(_majorant(zstar, zstar, tau), rel=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_tv_majorant(seed):
    r = np.random.default_rng(seed)
    dims, tau = (4, 5, 3), 1e-2
    x = r.standard_normal(60)
    xs = r.standard_normal(60)
    w = diffreg.weights_from_field(xs, dims, tau).w
    s = np.sqrt(diffreg.grad_magnitude_sq(xs, dims) + tau * tau)
    g2 = diffreg.grad_magnitude_sq(x, dims)
    bound = 0.5 * float(np.sum(w * w * g2)) + 0.5 * float(np.sum(s + tau * tau / s))
    assert diffreg.smoothed_tv(x, dims, tau) <= bound * (1 + 1e-12)


def test_weights_act_diagonally(rng):
    v = Volume((4, 4, 4), data=rng.standard_normal(64))
    W = tv_weights(v, 1e-2).as_map()
    y = rng.standard_normal(W.domain_size)
    mask = rng.random(W.domain_size) > 0.5
    assert_array_equal(W.apply(y) * mask, W.apply(y * mask))


def test_default_tau_floor():
    assert diffreg.default_tau(np.zeros(10)) == diffreg.TAU_FLOOR
    assert diffreg.default_tau(np.array([0.0, 2.0])) == pytest.approx(2e-4)
