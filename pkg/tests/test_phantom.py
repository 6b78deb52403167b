import math

import numpy as np
import pytest

from liploss import phantom as ph
from liploss.errors import ConfigError
from liploss.phantom import Organ, PhantomRanges, PhantomSpec


def superellipse_area(a, b, n):
    return 4 * a * b * math.gamma(1 + 1 / n) ** 2 / math.gamma(1 + 2 / n)


def test_single_ellipse_rasterization():
    spec = PhantomSpec(organs=(Organ((0.0, 0.0), (20.0, 14.0), 0.096, 1.0),))
    mu, lam = ph.generate_truth(spec)
    c = 31.5
    i, j = np.mgrid[:64, :64]
    r = ((i - c) / 20) ** 2 + ((j - c) / 14) ** 2
    assert np.all(mu[r < 0.8] == 0.096)
    assert np.all(mu[r > 1.2] == 0)
    assert mu.min() >= 0 and mu.max() <= 0.096
    assert np.any((mu > 0) & (mu < 0.096))
    np.testing.assert_array_equal(lam > 0, mu > 0)


def test_mass_matches_analytic_area():
    organs = (
        Organ((-12.0, -10.0), (9.0, 6.0), 0.096, 1.0, angle=25.0),
        Organ((10.0, 8.0), (7.0, 11.0), 0.15, 2.0, exponent=3.0),
        Organ((12.0, -14.0), (5.0, 5.0), 0.03, 0.5),
    )
    mu, _ = ph.generate_truth(PhantomSpec(organs=organs))
    expected = sum(superellipse_area(*o.semi_axes, o.exponent) * o.mu for o in organs)
    assert abs(mu.sum() - expected) <= 0.01 * expected


def test_truth_deterministic():
    a = ph.make_sample(PhantomRanges(), 11)
    b = ph.make_sample(PhantomRanges(), 11)
    for k in ("lambda_input", "mu_input", "mu_truth"):
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))


def test_organ_outside_disk_rejected():
    with pytest.raises(ConfigError):
        ph.generate_truth(PhantomSpec(organs=(Organ((25.0, 0.0), (10.0, 10.0), 0.1, 1.0),)))


def test_spec_invariants_enforced():
    with pytest.raises(ConfigError):
        PhantomSpec(organs=(Organ((0.0, 0.0), (5.0, 5.0), 0.31, 1.0),))
    with pytest.raises(ConfigError):
        PhantomSpec(organs=(Organ((0.0, 0.0), (5.0, 5.0), 0.1, -1.0),))


def _spec(**kw):
    base = dict(organs=(Organ((0.0, 0.0), (22.0, 18.0), 0.096, 1.0),), seed=4)
    base.update(kw)
    return PhantomSpec(**base)


def test_degrade_zero_noise():
    spec = _spec(mu_noise_std=0.0, lambda_bias_amplitude=0.0, lambda_noise=0.0)
    mu, lam = ph.generate_truth(spec)
    pair = ph.degrade(mu, lam, spec)
    np.testing.assert_array_equal(pair.mu_input, ph.blur(mu, spec.mu_blur))
    np.testing.assert_array_equal(pair.lambda_input, lam)


def test_degrade_noise_std():
    spec = _spec(mu_noise_std=0.02, shape=(128, 128),
                 organs=(Organ((0.0, 0.0), (50.0, 40.0), 0.096, 1.0),))
    mu, lam = ph.generate_truth(spec)
    pair = ph.degrade(mu, lam, spec)
    body = mu > 0.09
    resid = (pair.mu_input - ph.blur(mu, spec.mu_blur))[body]
    assert abs(resid.std() / 0.02 - 1) <= 0.10


def test_degrade_converges_as_noise_vanishes():
    mu, lam = ph.generate_truth(_spec())
    diffs = []
    for s in (0.02, 0.002, 0.0002):
        spec = _spec(mu_noise_std=s)
        diffs.append(np.abs(ph.degrade(mu, lam, spec).mu_input - ph.blur(mu, spec.mu_blur)).max())
    assert diffs[0] > diffs[1] > diffs[2] and diffs[2] < 1e-3


def test_degrade_clamps():
    spec = _spec(mu_noise_std=0.2, lambda_noise=3.0)
    mu, lam = ph.generate_truth(spec)
    pair = ph.degrade(mu, lam, spec)
    assert pair.mu_input.min() >= 0 and pair.lambda_input.min() >= 0


def test_bias_field_is_smooth_and_bounded():
    rng = np.random.default_rng(0)
    f = ph._bias_field(rng, (64, 64), 0.3)
    assert f.min() >= 0.05 and abs(f.mean() - 1) < 0.5
    assert np.abs(np.diff(f, axis=0)).max() < 0.05


def test_dataset_invariant_sweep():
    data = ph.make_dataset(40, seed=3)
    assert len(data) == 40
    for p in data:
        assert p.mu_truth.shape == p.mu_input.shape == p.lambda_input.shape == (64, 64)
        for v in (p.mu_truth, p.mu_input):
            assert v.min() >= 0 and v.max() <= ph.MU_MAX
        assert p.lambda_input.min() >= 0
        # support stays inside the inscribed disk
        i, j = np.nonzero(p.mu_truth)
        assert np.max(np.hypot(i - 31.5, j - 31.5)) <= 31.5 + 1
    one = ph.make_dataset(1, seed=3)
    assert len(one) == 1


def test_disjoint_seeds_differ():
    a = ph.make_dataset(3, seed=1)
    b = ph.make_dataset(3, seed=2)
    for x in a:
        for y in b:
            assert not np.array_equal(x.mu_truth, y.mu_truth)
    with pytest.raises(ConfigError):
        ph.make_dataset(0)
