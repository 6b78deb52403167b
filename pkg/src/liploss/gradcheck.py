"""Central finite-difference checks of every differentiable path.

An element passes when ``|analytic - numeric| <= rtol * max(|a|, |n|)`` or
the absolute difference is below ``atol``; the reported error is
``|a - n| / max(|a|, |n|, atol / rtol)`` so that a value <= ``rtol`` means pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import losses
from . import network
from .projector import make_angle_set, project, rotate_bilinear

RTOL = 1e-5
ATOL = 1e-8
STEP = 1e-6
# primitives are (piecewise) linear or smooth, so truncation error is negligible and a
# larger step suppresses the round-off floor
PRIMITIVE_STEP = 1e-5


@dataclass
class Check:
    name: str
    max_error: float
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray, rtol: float = RTOL, atol: float = ATOL) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol / rtol)
    return float(np.max(np.abs(a - n) / denom))


def numeric_gradient(fn: Callable[[], float], x: np.ndarray, indices=None, step: float = STEP) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. entries of ``x`` (perturbed in place, then restored)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        orig = flat[i]
        h = step * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def check(name: str, build: Callable[[Sequence[ad.Tensor]], ad.Tensor], arrays: Sequence[np.ndarray],
          rng: np.random.Generator | None = None, max_elements: int | None = None,
          corrupt: bool = False, rtol: float = RTOL, step: float = STEP) -> Check:
    """Compare the reverse-mode gradient of ``build(tensors)`` with finite differences.

    ``max_elements`` caps the number of checked entries per input (sampled
    with ``rng``).
    """
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    analytic = ad.backward(build(tensors), tensors)

    def value() -> float:
        with ad.no_grad():
            return build(tensors).item()

    worst = 0.0
    for t, g in zip(tensors, analytic):
        if max_elements is not None and t.size > max_elements:
            idx = np.sort(rng.choice(t.size, size=max_elements, replace=False))
        else:
            idx = np.arange(t.size)
        num = numeric_gradient(value, t.data, idx, step)
        a = g.reshape(-1)[idx]
        if corrupt:
            a = a * (1 + 1e-2) + 1e-3
        worst = max(worst, relative_error(a, num, rtol))
    return Check(name, worst, worst <= rtol)


def _projected(build, weight: np.ndarray):
    """Scalarize a tensor-valued primitive as <out, weight>."""
    w = ad.Tensor(weight)

    def scalar(ts):
        return ad.sum_(ad.mul(build(ts), w))
    return scalar


def primitive_checks(rng: np.random.Generator, size: int = 5, corrupt: bool = False) -> list[Check]:
    s = size
    results = []

    def away_from_zero(shape):
        x = rng.standard_normal(shape)
        return x + np.where(x >= 0, 0.1, -0.1)

    def run(name, fn, arrays):
        probe = fn([ad.Tensor(a) for a in arrays])
        w = rng.standard_normal(probe.shape)
        results.append(check(name, _projected(fn, w), arrays, rng, corrupt=corrupt and not results,
                             step=PRIMITIVE_STEP))

    x, y = rng.standard_normal((s, s)), rng.standard_normal((s, s))
    run("add", lambda t: ad.add(t[0], t[1]), [x, y])
    run("sub", lambda t: ad.sub(t[0], t[1]), [x, y])
    run("mul", lambda t: ad.mul(t[0], t[1]), [x, y])
    run("scalar-mul", lambda t: ad.scale(t[0], -2.5), [x])
    run("abs", lambda t: ad.abs_(t[0]), [away_from_zero((s, s))])
    run("square", lambda t: ad.square(t[0]), [x])
    run("relu", lambda t: ad.relu(t[0]), [away_from_zero((s, s))])
    run("tanh", lambda t: ad.tanh(t[0]), [x])
    run("reduce-sum", lambda t: ad.reduce(t[0], "sum", axes=0), [x])
    run("reduce-mean", lambda t: ad.reduce(t[0], "mean", axes=1), [x])
    run("spatial-gradient", lambda t: ad.spatial_gradient(t[0], 1), [x])
    run("conv-symmetric", lambda t: ad.conv_nd(t[0], t[1], bias=t[2]),
        [rng.standard_normal((2, 3, s, s)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)])
    run("conv-unbatched", lambda t: ad.conv_nd(t[0], t[1]),
        [rng.standard_normal((2, s, s)), rng.standard_normal((3, 2, 3, 3))])
    even = 2 * (s // 2 + 1)
    run("conv-stride2", lambda t: ad.conv_nd(t[0], t[1], stride=2, padding_mode="none"),
        [rng.standard_normal((2, 2, even, even)), rng.standard_normal((3, 2, 2, 2))])
    run("conv-3d", lambda t: ad.conv_nd(t[0], t[1]),
        [rng.standard_normal((1, 2, 4, 4, 4)), rng.standard_normal((2, 2, 3, 3, 3))])
    run("batch-norm-train",
        lambda t: ad.batch_norm(t[0], t[1], t[2], np.zeros(3), np.ones(3), "train"),
        [rng.standard_normal((2, 3, 4, 4)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)])
    run("batch-norm-eval",
        lambda t: ad.batch_norm(t[0], t[1], t[2], np.full(3, 0.2), np.full(3, 1.7), "eval"),
        [rng.standard_normal((2, 3, 4, 4)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)])
    drop_seed = int(rng.integers(1 << 31))
    run("dropout", lambda t: ad.dropout(t[0], 0.3, "train", drop_seed), [x])
    run("concat", lambda t: ad.concat([t[0], t[1]], axis=1),
        [rng.standard_normal((1, 2, s, s)), rng.standard_normal((1, 3, s, s))])
    run("upsample", lambda t: ad.upsample_nearest(t[0], 2), [rng.standard_normal((1, 2, s, s))])
    run("rotate", lambda t: rotate_bilinear(t[0], 37.0), [rng.standard_normal((2, s + 3, s + 3))])
    run("project", lambda t: project(t[0], 37.0, 0.4), [rng.standard_normal((2, s + 3, s + 3))])
    return results


def loss_checks(rng: np.random.Generator, size: int = 8, corrupt: bool = False) -> list[Check]:
    angles = make_angle_set(4)
    weights = losses.LossWeights(1.0, 0.02)
    x, y = rng.standard_normal((size, size)), rng.standard_normal((size, size))
    ycons = ad.Tensor(y)
    cases = [
        ("l1-loss", lambda t: losses.l1_loss(t[0], ycons)),
        ("gdl-loss", lambda t: losses.gdl_loss(t[0], ycons)),
        ("lip-loss", lambda t: losses.lip_loss(t[0], ycons, angles)),
        ("total-loss", lambda t: losses.total_loss(t[0], ycons, weights, angles)),
    ]
    return [check(name, fn, [x.copy()], rng, corrupt=corrupt and i == 0) for i, (name, fn) in enumerate(cases)]


def network_check(rng: np.random.Generator, size: int = 16, n_params: int = 20, corrupt: bool = False,
                  rtol: float = RTOL) -> Check:
    """Total-loss gradient w.r.t. ``n_params`` sampled weights of a levels=2, base-4 U-net."""
    cfg = network.UNetConfig(levels=2, base_channels=4)
    params = network.init_params(cfg, int(rng.integers(1 << 31)))
    x = ad.Tensor(rng.standard_normal((2, 2, size, size)))
    y = ad.Tensor(rng.standard_normal((2, 1, size, size)))
    drop_seed = int(rng.integers(1 << 31))
    names = list(params.tensors)

    def loss() -> ad.Tensor:
        out = network.forward(params, x, "train", drop_seed)
        return losses.total_loss(out, y, losses.LossWeights(1.0, 0.02), make_angle_set(4))

    tensors = params.parameters()
    grads = ad.backward(loss(), tensors)
    flat = [(k, j) for k, t in enumerate(tensors) for j in range(t.size)]
    picks = rng.choice(len(flat), size=min(n_params, len(flat)), replace=False)

    def value() -> float:
        with ad.no_grad():
            return loss().item()

    analytic, numeric = [], []
    for p in sorted(picks):
        k, j = flat[p]
        analytic.append(grads[k].reshape(-1)[j])
        numeric.append(numeric_gradient(value, tensors[k].data, [j])[0])
    a = np.array(analytic)
    if corrupt:
        a = a * (1 + 1e-2) + 1e-3
    err = relative_error(a, np.array(numeric), rtol)
    return Check(f"network[{','.join(sorted({names[flat[p][0]].split('.')[0] for p in picks}))}]",
                 err, err <= rtol)


def run_suite(seed: int = 0, size: int = 5, corrupt: bool = False) -> list[Check]:
    rng = np.random.default_rng(seed)
    results = primitive_checks(rng, size, corrupt)
    results += loss_checks(rng, max(size, 8))
    results.append(network_check(rng))
    for r in results:
        r.name = f"seed{seed}:{r.name}"
    return results
