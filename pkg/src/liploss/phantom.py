"""Synthetic torso phantoms and their MLAA-like degradations.

Ground truth is a painted stack of (super)ellipses with anti-aliased
edges.  The degraded ``mu_input`` is blurred and noisy, the degraded
``lambda_input`` carries a smooth multiplicative bias and count noise,
mimicking the two failure modes of joint activity/attenuation estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError

MU_SOFT_TISSUE = 0.096
MU_LUNG = 0.03
MU_BONE = 0.15
MU_MAX = 0.3

_SUPERSAMPLE = {2: 8, 3: 4}


@dataclass(frozen=True)
class Organ:
    """One painted primitive; later organs overwrite earlier ones.

    ``center`` is in voxels relative to the grid center, ordered like the
    array axes; ``semi_axes`` likewise.  ``angle`` rotates the shape in the
    plane of the last two axes.  ``exponent`` 2 is an ellipse, larger values
    give boxier superellipses.
    """

    center: tuple[float, ...]
    semi_axes: tuple[float, ...]
    mu: float
    activity: float
    angle: float = 0.0
    exponent: float = 2.0
    name: str = ""


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, ...] = (64, 64)
    voxel_width: float = 0.6
    organs: tuple[Organ, ...] = ()
    mu_noise_std: float = 0.012
    mu_noise_corr: float = 1.0
    mu_blur: float = 1.0
    lambda_bias_amplitude: float = 0.3
    lambda_noise: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if len(self.shape) not in (2, 3):
            raise ConfigError("phantoms are 2D or 3D")
        if self.voxel_width <= 0:
            raise ConfigError("voxel_width must be positive")
        for o in self.organs:
            if not 0 <= o.mu <= MU_MAX:
                raise ConfigError(f"organ {o.name!r}: mu {o.mu} outside [0, {MU_MAX}]")
            if o.activity < 0:
                raise ConfigError(f"organ {o.name!r}: negative activity")
            if len(o.center) != len(self.shape) or len(o.semi_axes) != len(self.shape):
                raise ConfigError(f"organ {o.name!r}: rank does not match grid")


@dataclass
class SamplePair:
    lambda_input: np.ndarray
    mu_input: np.ndarray
    mu_truth: np.ndarray
    voxel_width: float
    seed: int = 0

    def __post_init__(self):
        if not (self.lambda_input.shape == self.mu_input.shape == self.mu_truth.shape):
            raise ConfigError("sample volumes must share one shape")


def _inplane_radius(organ: Organ) -> float:
    a, b = organ.semi_axes[-2:]
    t = np.linspace(0, 2 * np.pi, 721)
    p = 2.0 / organ.exponent
    u = np.sign(np.cos(t)) * np.abs(np.cos(t)) ** p * a
    v = np.sign(np.sin(t)) * np.abs(np.sin(t)) ** p * b
    th = math.radians(organ.angle)
    cy, cx = organ.center[-2:]
    ys = cy + u * math.cos(th) - v * math.sin(th)
    xs = cx + u * math.sin(th) + v * math.cos(th)
    return float(np.max(np.hypot(ys, xs)))


def _coverage(organ: Organ, shape: tuple[int, ...]) -> tuple[tuple[slice, ...], np.ndarray]:
    """Fraction of each voxel inside ``organ``, on the organ's bounding box."""
    d = len(shape)
    ss = _SUPERSAMPLE[d]
    centre = [(n - 1) / 2 for n in shape]
    reach = max(organ.semi_axes) * (2 ** 0.5) + 1
    box = []
    for ax in range(d):
        c = centre[ax] + organ.center[ax]
        lo = max(int(math.floor(c - reach)), 0)
        hi = min(int(math.ceil(c + reach)) + 1, shape[ax])
        box.append(slice(lo, hi))
    sub = (np.arange(ss) + 0.5) / ss - 0.5
    axes = [np.add.outer(np.arange(s.start, s.stop), sub).ravel() - centre[ax] - organ.center[ax]
            for ax, s in enumerate(box)]
    grids = np.meshgrid(*axes, indexing="ij")
    th = math.radians(organ.angle)
    y, x = grids[-2], grids[-1]
    u = y * math.cos(th) + x * math.sin(th)
    v = -y * math.sin(th) + x * math.cos(th)
    coords = list(grids[:-2]) + [u, v]
    level = sum(np.abs(c / a) ** organ.exponent for c, a in zip(coords, organ.semi_axes))
    inside = (level <= 1.0).astype(np.float64)
    fine = tuple(s.stop - s.start for s in box)
    split = []
    for n in fine:
        split += [n, ss]
    cov = inside.reshape(split).mean(axis=tuple(range(1, 2 * d, 2)))
    return tuple(box), cov


def generate_truth(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize ``spec.organs`` into (mu in cm^-1, activity in SUV)."""
    inscribed = (min(spec.shape[-2:]) - 1) / 2
    mu = np.zeros(spec.shape)
    lam = np.zeros(spec.shape)
    for organ in spec.organs:
        if _inplane_radius(organ) > inscribed:
            raise ConfigError(f"organ {organ.name!r} leaves the inscribed disk of the grid")
        box, cov = _coverage(organ, spec.shape)
        mu[box] = mu[box] * (1 - cov) + organ.mu * cov
        lam[box] = lam[box] * (1 - cov) + organ.activity * cov
    return mu, lam


def blur(volume: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return volume.copy()
    return ndimage.gaussian_filter(volume, sigma, mode="constant", cval=0.0)


def _unit_correlated_noise(rng: np.random.Generator, shape, corr: float) -> np.ndarray:
    white = rng.standard_normal(shape)
    if corr <= 0:
        return white
    impulse = np.zeros((int(8 * corr) * 2 + 1,) * len(shape))
    impulse[(impulse.shape[0] // 2,) * len(shape)] = 1.0
    gain = np.sqrt(np.sum(ndimage.gaussian_filter(impulse, corr, mode="constant") ** 2))
    return ndimage.gaussian_filter(white, corr, mode="wrap") / gain


def _bias_field(rng: np.random.Generator, shape, amplitude: float) -> np.ndarray:
    field_ = np.ones(shape)
    if amplitude <= 0:
        return field_
    grids = np.meshgrid(*[np.arange(n) - (n - 1) / 2 for n in shape], indexing="ij")
    extent = min(shape)
    for _ in range(int(rng.integers(1, 4))):
        centre = rng.uniform(-0.3, 0.3, size=len(shape)) * extent
        width = rng.uniform(0.25, 0.5) * extent
        amp = rng.uniform(-amplitude, amplitude)
        r2 = sum((g - c) ** 2 for g, c in zip(grids, centre))
        field_ += amp * np.exp(-r2 / (2 * width ** 2))
    return np.clip(field_, 0.05, None)


def degrade(mu_truth: np.ndarray, lambda_truth: np.ndarray, spec: PhantomSpec) -> SamplePair:
    if mu_truth.shape != lambda_truth.shape:
        raise ConfigError("mu and lambda volumes must share one shape")
    rng = np.random.default_rng([spec.seed, 1])
    mu_blur = blur(mu_truth, spec.mu_blur)
    noise = _unit_correlated_noise(rng, mu_truth.shape, spec.mu_noise_corr)
    mu_input = np.maximum(mu_blur + spec.mu_noise_std * noise, 0.0)
    bias = _bias_field(rng, mu_truth.shape, spec.lambda_bias_amplitude)
    lam_b = lambda_truth * bias
    counts = rng.standard_normal(mu_truth.shape)
    lam_input = np.maximum(lam_b + spec.lambda_noise * np.sqrt(lam_b) * counts, 0.0)
    return SamplePair(lam_input, mu_input, mu_truth, spec.voxel_width, spec.seed)


@dataclass(frozen=True)
class PhantomRanges:
    """Randomization ranges for ``make_dataset`` (fractions of the inscribed radius)."""

    shape: tuple[int, ...] = (64, 64)
    voxel_width: float = 0.6
    body_semi_minor: tuple[float, float] = (0.55, 0.75)
    body_semi_major: tuple[float, float] = (0.8, 0.95)
    body_exponent: tuple[float, float] = (2.0, 3.0)
    body_activity: tuple[float, float] = (0.6, 1.4)
    organ_activity: tuple[float, float] = (1.5, 6.0)
    lung_activity: tuple[float, float] = (0.2, 0.6)
    bone_activity: tuple[float, float] = (0.8, 2.5)
    gas_pockets: tuple[int, int] = (0, 3)
    mu_noise_std: float = 0.012
    mu_noise_corr: float = 1.0
    mu_blur: float = 1.0
    lambda_bias_amplitude: float = 0.3
    lambda_noise: float = 0.15


def _u(rng, lo_hi):
    return float(rng.uniform(*lo_hi))


def random_spec(ranges: PhantomRanges, seed: int) -> PhantomSpec:
    """Draw one chest- or abdomen-like slice."""
    rng = np.random.default_rng([seed, 0])
    if len(ranges.shape) != 2:
        raise ConfigError("random phantoms are 2D slices; stack them for 3D")
    r_in = (min(ranges.shape) - 1) / 2
    by = _u(rng, ranges.body_semi_minor) * r_in
    bx = _u(rng, ranges.body_semi_major) * r_in
    body = Organ((0.0, 0.0), (by, bx), MU_SOFT_TISSUE, _u(rng, ranges.body_activity),
                 angle=_u(rng, (-8, 8)), exponent=_u(rng, ranges.body_exponent), name="body")
    fit = 0.97 * r_in / _inplane_radius(body)
    if fit < 1:
        by, bx = by * fit, bx * fit
        body = Organ(body.center, (by, bx), body.mu, body.activity, body.angle, body.exponent, body.name)
    organs = [body]
    spine_y = by * _u(rng, (0.45, 0.6))
    chest = rng.random() < 0.5
    if chest:
        for side in (-1, 1):
            cx = side * bx * _u(rng, (0.35, 0.5))
            organs.append(Organ((-by * _u(rng, (0.0, 0.15)), cx),
                                (by * _u(rng, (0.5, 0.65)), bx * _u(rng, (0.22, 0.32))),
                                MU_LUNG, _u(rng, ranges.lung_activity), angle=_u(rng, (-15, 15)),
                                name="lung"))
        organs.append(Organ((-by * _u(rng, (0.05, 0.25)), bx * _u(rng, (-0.05, 0.15))),
                            (by * _u(rng, (0.25, 0.35)),) * 2,
                            MU_SOFT_TISSUE, _u(rng, ranges.organ_activity), name="heart"))
    else:
        organs.append(Organ((-by * _u(rng, (0.0, 0.2)), -bx * _u(rng, (0.25, 0.4))),
                            (by * _u(rng, (0.4, 0.55)), bx * _u(rng, (0.3, 0.45))),
                            MU_SOFT_TISSUE, _u(rng, ranges.organ_activity), angle=_u(rng, (-20, 20)),
                            name="liver"))
        for i in range(int(rng.integers(ranges.gas_pockets[0], ranges.gas_pockets[1] + 1))):
            r = by * _u(rng, (0.08, 0.18))
            organs.append(Organ((-by * _u(rng, (-0.1, 0.3)), bx * _u(rng, (0.0, 0.45))),
                                (r, r * _u(rng, (0.8, 1.6))), 0.0, 0.0,
                                angle=_u(rng, (0, 180)), name=f"gas{i}"))
    organs.append(Organ((spine_y, 0.0), (by * _u(rng, (0.15, 0.2)),) * 2, MU_BONE,
                        _u(rng, ranges.bone_activity), name="spine"))
    return PhantomSpec(shape=tuple(ranges.shape), voxel_width=ranges.voxel_width,
                       organs=tuple(organs), mu_noise_std=ranges.mu_noise_std,
                       mu_noise_corr=ranges.mu_noise_corr, mu_blur=ranges.mu_blur,
                       lambda_bias_amplitude=ranges.lambda_bias_amplitude,
                       lambda_noise=ranges.lambda_noise, seed=int(seed))


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_sample(ranges: PhantomRanges, seed: int) -> SamplePair:
    spec = random_spec(ranges, seed)
    mu, lam = generate_truth(spec)
    return degrade(mu, lam, spec)


def make_dataset(n: int, ranges: PhantomRanges = PhantomRanges(), seed: int = 0) -> list[SamplePair]:
    if n < 1:
        raise ConfigError("dataset needs at least one sample")
    return [make_sample(ranges, sample_seed(seed, i)) for i in range(n)]
