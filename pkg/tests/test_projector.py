import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liploss import autodiff as ad
from liploss import gradcheck as gc
from liploss.errors import ConfigError, ShapeError
from liploss.phantom import PhantomSpec, generate_truth
from liploss.projector import (AngleSet, make_angle_set, project, project_adjoint, rotate_bilinear,
                               sinogram)

from oracles import project_loops, rotate_loops


def blob(n, sigma, center=None):
    c = (n - 1) / 2 if center is None else center
    i, j = np.mgrid[:n, :n]
    return np.exp(-((i - c) ** 2 + (j - c) ** 2) / (2 * sigma ** 2))


def disk(n, radius, value):
    c = (n - 1) / 2
    # 16x16 supersampling for partial-volume edges
    sub = (np.arange(16) + 0.5) / 16 - 0.5
    i = np.arange(n)[:, None, None, None] + sub[None, None, :, None]
    j = np.arange(n)[None, :, None, None] + sub[None, None, None, :]
    inside = (i - c) ** 2 + (j - c) ** 2 <= radius ** 2
    return value * inside.mean(axis=(2, 3))


def test_angle_sets():
    assert make_angle_set(4).angles == (0.0, 45.0, 90.0, 135.0)
    assert make_angle_set(1).angles == (0.0,)
    assert make_angle_set(6).angles == (0.0, 30.0, 60.0, 90.0, 120.0, 150.0)
    assert make_angle_set(6).count == 6
    with pytest.raises(ConfigError):
        make_angle_set(0)
    with pytest.raises(ConfigError):
        AngleSet((0.0, 180.0))
    with pytest.raises(ConfigError):
        AngleSet((45.0, 10.0))


def test_rotate_identity_and_quarter_turn():
    x = np.random.default_rng(0).standard_normal((9, 9))
    np.testing.assert_array_equal(rotate_bilinear(x, 0.0), x)
    np.testing.assert_array_equal(rotate_bilinear(x, 90.0), np.rot90(x))
    np.testing.assert_array_equal(rotate_bilinear(x, 180.0), np.rot90(x, 2))


def test_rotate_matches_loop_oracle():
    x = np.random.default_rng(1).standard_normal((12, 12))
    for a in (17.0, 45.0, 128.5, -33.0):
        np.testing.assert_allclose(rotate_bilinear(x, a), rotate_loops(x, a), rtol=0, atol=1e-12)


def test_rotate_roundtrip_band_limited():
    # 3 sigma = 24 voxels stays inside the inner half (radius 32) of the grid
    x = blob(128, 8.0)
    back = rotate_bilinear(rotate_bilinear(x, 30.0), -30.0)
    assert np.max(np.abs(back - x)) <= 1e-2 * x.max()


def test_rotate_rejects_non_square():
    with pytest.raises(ShapeError):
        rotate_bilinear(np.ones((4, 5)), 10.0)
    with pytest.raises(ShapeError):
        project(np.ones((4, 5)), 10.0)


def test_project_zero_and_quarter_turn():
    x = np.random.default_rng(2).standard_normal((8, 8))
    np.testing.assert_allclose(project(x, 0.0, 0.4), x.sum(axis=0) * 0.4, rtol=1e-14)
    # 90 degrees: rays run along rows; bin j collects row n-1-j
    np.testing.assert_allclose(project(x, 90.0), x.sum(axis=1)[::-1], rtol=1e-14)


def test_project_matches_loop_oracle():
    x = np.random.default_rng(3).standard_normal((16, 16))
    for a in make_angle_set(4):
        np.testing.assert_allclose(project(x, a, 0.6), project_loops(x, a, 0.6), rtol=0, atol=1e-12)


def test_project_disk_chord_lengths():
    n, R, mu, w = 128, 40.0, 0.096, 0.4
    img = disk(n, R, mu)
    s = np.arange(n) - (n - 1) / 2
    keep = np.abs(s) <= 0.9 * R
    analytic = 2 * mu * np.sqrt(np.maximum(R ** 2 - s ** 2, 0)) * w
    for a in (0.0, 45.0, 90.0, 135.0):
        p = project(img, a, w)
        assert np.max(np.abs(p[keep] - analytic[keep]) / analytic[keep]) <= 0.02


def test_projection_batched_per_slice():
    x = np.random.default_rng(4).standard_normal((3, 10, 10))
    p = project(x, 37.0)
    assert p.shape == (3, 10)
    for k in range(3):
        np.testing.assert_allclose(p[k], project(x[k], 37.0), rtol=1e-13)
    assert sinogram(x, make_angle_set(4)).shape == (4, 3, 10)


def test_adjoint_simple_cases():
    p = np.arange(5.0)
    np.testing.assert_allclose(project_adjoint(p, 0.0, 5, 0.5), np.tile(p, (5, 1)) * 0.5, rtol=1e-15)
    assert not np.any(project_adjoint(np.zeros(6), 33.0, 6))
    with pytest.raises(ShapeError):
        project_adjoint(np.zeros(5), 10.0, 6)


def test_linearity():
    rng = np.random.default_rng(5)
    x, z = rng.standard_normal((20, 20)), rng.standard_normal((20, 20))
    lhs = project(2.5 * x - 0.75 * z, 61.0)
    np.testing.assert_allclose(lhs, 2.5 * project(x, 61.0) - 0.75 * project(z, 61.0), rtol=0, atol=1e-12)


def test_mass_preservation():
    x = np.random.default_rng(6).random((16, 16))
    for a in (0.0, 90.0):
        assert abs(project(x, a, 0.3).sum() - x.sum() * 0.3) <= 1e-12 * x.sum()
    # smooth content inside the inscribed disk
    truth, _ = generate_truth(PhantomSpec(seed=3))
    for a in (13.0, 45.0, 77.7, 135.0):
        assert abs(project(truth, a).sum() - truth.sum()) <= 1e-3 * truth.sum()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 179.99), st.sampled_from([8, 13, 32]))
def test_adjoint_identity_property(seed, angle, n):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((n, n)), rng.standard_normal(n)
    px = project(x, angle, 0.7)
    lhs = float(px @ y)
    rhs = float(np.sum(x * project_adjoint(y, angle, n, 0.7)))
    assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(px) * np.linalg.norm(y)


def test_project_gradcheck():
    rng = np.random.default_rng(7)
    w = rng.standard_normal(9)
    res = gc.check("proj", lambda t: ad.sum_(ad.square(ad.mul(project(t[0], 37.0, 0.5), ad.Tensor(w)))),
                   [rng.standard_normal((9, 9))])
    assert res.max_error <= 1e-5
