"""Training losses: L1, gradient difference, line-integral projection, and their weighted sum.

All losses accept Tensors or arrays and return scalar Tensors.  Image
tensors carry ``spatial_rank`` trailing spatial axes; any leading axes
(batch, channel) are averaged over like the spatial ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .projector import AngleSet, make_angle_set, project

DEFAULT_LAMBDA1 = 1.0
DEFAULT_LAMBDA2 = 0.02


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = DEFAULT_LAMBDA2

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")


def _pair(x, y, op):
    x, y = ad.as_tensor(x), ad.as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"{op}: shape mismatch {x.shape} vs {y.shape}")
    return x, y


def l1_loss(x, y) -> ad.Tensor:
    x, y = _pair(x, y, "l1_loss")
    return ad.mean(ad.abs_(x - y))


def gdl_loss(x, y, spatial_rank: int = 2) -> ad.Tensor:
    """Sum over spatial axes of mean((|dX| - |dY|)^2) with forward differences."""
    x, y = _pair(x, y, "gdl_loss")
    if spatial_rank > x.ndim:
        raise ShapeError(f"spatial_rank {spatial_rank} exceeds tensor rank {x.ndim}")
    total = None
    for axis in range(x.ndim - spatial_rank, x.ndim):
        if x.shape[axis] < 2:
            raise ShapeError(f"gdl_loss needs extent >= 2 on spatial axis {axis}")
        diff = ad.abs_(ad.spatial_gradient(x, axis)) - ad.abs_(ad.spatial_gradient(y, axis))
        term = ad.mean(ad.square(diff))
        total = term if total is None else total + term
    return total


def lip_loss(x, y, angles: AngleSet | None = None, voxel_width: float = 1.0) -> ad.Tensor:
    """Mean over angles of the mean squared line-integral difference."""
    x, y = _pair(x, y, "lip_loss")
    angles = make_angle_set(4) if angles is None else angles
    if len(angles) == 0:
        raise ConfigError("empty angle set")
    total = None
    for a in angles:
        # project the difference once: P is linear, so P(X) - P(Y) = P(X - Y)
        d = project(x - y, a, voxel_width)
        term = ad.mean(ad.square(d))
        total = term if total is None else total + term
    return total * (1.0 / len(angles))


def im_loss(x, y, weights: LossWeights = LossWeights(), spatial_rank: int = 2) -> ad.Tensor:
    return l1_loss(x, y) + gdl_loss(x, y, spatial_rank) * weights.lambda1


def total_loss(x, y, weights: LossWeights = LossWeights(), angles: AngleSet | None = None,
               spatial_rank: int = 2, voxel_width: float = 1.0) -> ad.Tensor:
    return (l1_loss(x, y)
            + gdl_loss(x, y, spatial_rank) * weights.lambda1
            + lip_loss(x, y, angles, voxel_width) * weights.lambda2)
