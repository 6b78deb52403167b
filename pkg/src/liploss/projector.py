"""Parallel-beam line-integral projection by image rotation.

A projection at angle ``theta`` rotates the image by ``-theta`` with
bilinear interpolation and sums along in-plane axis 0 (rows), so bin ``j``
collects column ``j`` of the rotated image.  Rotation is a fixed sparse
matrix for a given grid size and angle, which makes the adjoint an exact
transpose.

The last two axes of an array are the in-plane axes; any leading axes
(batch, channel, transaxial slice) are projected independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class AngleSet:
    """Projection angles in degrees, uniformly covering [0, 180)."""

    angles: tuple[float, ...]

    def __post_init__(self):
        if not self.angles:
            raise ConfigError("angle set is empty")
        if any(not 0 <= a < 180 for a in self.angles):
            raise ConfigError(f"angles must lie in [0, 180): {self.angles}")
        if any(b <= a for a, b in zip(self.angles, self.angles[1:])):
            raise ConfigError("angles must be strictly increasing")

    @property
    def count(self) -> int:
        return len(self.angles)

    def __iter__(self):
        return iter(self.angles)

    def __len__(self):
        return len(self.angles)


def make_angle_set(n: int) -> AngleSet:
    if n < 1:
        raise ConfigError(f"need at least one projection angle, got {n}")
    return AngleSet(tuple(j * 180 / n for j in range(n)))


def _cos_sin(degrees: float) -> tuple[float, float]:
    # exact values on the lattice-aligned angles keep 90-degree rotations a pure permutation
    d = degrees % 360.0
    exact = {0.0: (1.0, 0.0), 90.0: (0.0, 1.0), 180.0: (-1.0, 0.0), 270.0: (0.0, -1.0)}
    if d in exact:
        return exact[d]
    r = math.radians(d)
    return math.cos(r), math.sin(r)


@lru_cache(maxsize=256)
def rotation_matrix(n: int, degrees: float) -> sp.csr_matrix:
    """Sparse ``(n*n, n*n)`` bilinear counterclockwise rotation about the grid center.

    Output pixel ``(i, j)`` reads the source at the point obtained by
    rotating its centered coordinates by ``-degrees`` (rows point down,
    so ``y = c - i``).  Neighbours outside the grid contribute nothing.
    """
    c = (n - 1) / 2
    cos_t, sin_t = _cos_sin(degrees)
    ii, jj = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    x = jj - c
    y = c - ii
    xs = cos_t * x + sin_t * y
    ys = -sin_t * x + cos_t * y
    src_j = c + xs
    src_i = c - ys
    i0 = np.floor(src_i)
    j0 = np.floor(src_j)
    fi = src_i - i0
    fj = src_j - j0
    i0 = i0.astype(np.int64)
    j0 = j0.astype(np.int64)
    rows_out = np.arange(n * n).reshape(n, n)
    rows, cols, vals = [], [], []
    for di, dj, w in ((0, 0, (1 - fi) * (1 - fj)), (0, 1, (1 - fi) * fj),
                      (1, 0, fi * (1 - fj)), (1, 1, fi * fj)):
        si = i0 + di
        sj = j0 + dj
        ok = (si >= 0) & (si < n) & (sj >= 0) & (sj < n) & (w != 0)
        rows.append(rows_out[ok])
        cols.append(si[ok] * n + sj[ok])
        vals.append(w[ok])
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n))
    return mat.tocsr()


@lru_cache(maxsize=256)
def projection_matrix(n: int, degrees: float) -> sp.csr_matrix:
    """Sparse ``(n, n*n)`` map: rotate by ``-degrees``, then sum over rows."""
    rot = rotation_matrix(n, -degrees)
    summing = sp.kron(np.ones((1, n)), sp.identity(n), format="csr")
    return (summing @ rot).tocsr()


@lru_cache(maxsize=256)
def _transposed(kind: str, n: int, degrees: float) -> sp.csr_matrix:
    mat = rotation_matrix(n, degrees) if kind == "rotate" else projection_matrix(n, degrees)
    return mat.T.tocsr()


def _inplane(shape) -> int:
    if len(shape) < 2:
        raise ShapeError(f"need at least 2 dimensions, got shape {tuple(shape)}")
    h, w = shape[-2:]
    if h != w:
        raise ShapeError(f"in-plane extents must be square, got {h}x{w}")
    return h


def _apply(mat: sp.csr_matrix, x: np.ndarray, n_in: int, out_tail: tuple[int, ...]) -> np.ndarray:
    lead = x.shape[: x.ndim - (2 if n_in == 2 else 1)]
    flat = x.reshape(-1, mat.shape[1])
    out = np.asarray(mat @ flat.T).T
    return np.ascontiguousarray(out.reshape(lead + out_tail)).astype(x.dtype, copy=False)


def rotate_bilinear(image, degrees: float):
    """Rotate counterclockwise about ``((H-1)/2, (W-1)/2)``; Tensor in, Tensor out."""
    n = _inplane(np.shape(image.data if isinstance(image, ad.Tensor) else image))
    mat = rotation_matrix(n, float(degrees))
    fwd = lambda a: _apply(mat, a, 2, (n, n))
    adj = lambda g: _apply(_transposed("rotate", n, float(degrees)), g, 2, (n, n))
    if isinstance(image, ad.Tensor):
        return ad.linear_map(image, fwd, adj, "rotate")
    return fwd(np.asarray(image, dtype=np.float64))


def project(image, degrees: float, voxel_width: float = 1.0):
    """Line integrals of every in-plane slice at one angle.

    Returns shape ``image.shape[:-2] + (N,)``.  A Tensor input yields a
    differentiable Tensor whose backward pass is ``project_adjoint``.
    """
    is_tensor = isinstance(image, ad.Tensor)
    n = _inplane(image.shape if is_tensor else np.shape(image))
    mat = projection_matrix(n, float(degrees))
    w = float(voxel_width)

    def fwd(a):
        return _apply(mat, a, 2, (n,)) * a.dtype.type(w)

    def adj(g):
        return project_adjoint(g, degrees, n, w)

    if is_tensor:
        return ad.linear_map(image, fwd, adj, "project")
    return fwd(np.asarray(image, dtype=np.float64))


def project_adjoint(p, degrees: float, n: int | tuple, voxel_width: float = 1.0) -> np.ndarray:
    """Exact transpose of ``project``: smear bins along the rays, then rotate back.

    ``n`` is the in-plane extent (or the full target shape, whose last two
    axes must be ``(n, n)``).
    """
    p = np.asarray(p)
    if not isinstance(n, int):
        target = tuple(n)
        n = _inplane(target)
        if p.shape != target[:-2] + (n,):
            raise ShapeError(f"projection shape {p.shape} inconsistent with target {target}")
    if p.ndim < 1 or p.shape[-1] != n:
        raise ShapeError(f"projection length {p.shape[-1] if p.ndim else 0} does not match grid {n}")
    mat = _transposed("project", n, float(degrees))
    dtype = p.dtype if p.dtype in (np.float32, np.float64) else np.float64
    p = p.astype(dtype, copy=False)
    return _apply(mat, p, 1, (n, n)) * dtype.type(voxel_width)


def sinogram(image, angles: AngleSet, voxel_width: float = 1.0) -> np.ndarray:
    """Stack of projections, shape ``(len(angles),) + image.shape[:-2] + (N,)``."""
    return np.stack([project(image, a, voxel_width) for a in angles])
