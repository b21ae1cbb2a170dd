"""Feature grids, bilinear readout and RoI pooling with analytic input-gradients.

Cell ``(i, j)`` of a grid with stride ``s`` is centred at image point
``((j + 0.5) * s, (i + 0.5) * s)``.  The image extent of a grid is
``[0, W * s] x [0, H * s]``; points in the outer half-cell border read the
nearest edge cell (clamped), which keeps gradients defined at borders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box, DomainError


@dataclass(frozen=True)
class FeatureGrid:
    values: np.ndarray  # (C, H, W)
    stride: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or min(v.shape) < 1:
            raise DomainError(f"grid must be C x H x W with C, H, W >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DomainError("grid values must be finite")
        if not self.stride > 0:
            raise DomainError(f"stride must be positive, got {self.stride}")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def extent(self) -> tuple[float, float]:
        """Image-space ``(width, height)`` covered by the grid."""
        _, h, w = self.values.shape
        return (w * self.stride, h * self.stride)

    def cell_centers(self) -> np.ndarray:
        """``(H*W, 2)`` image-space centres in row-major cell order."""
        _, h, w = self.values.shape
        return cell_centers(h, w, self.stride)


def cell_centers(h: int, w: int, stride: float) -> np.ndarray:
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    return np.stack([(jj.ravel() + 0.5) * stride, (ii.ravel() + 0.5) * stride], axis=1)


@dataclass(frozen=True)
class InterpStencil:
    """Four flat cell indices (row-major) with nonnegative weights summing to one."""

    index: np.ndarray  # (4,) int
    weight: np.ndarray  # (4,) float

    def dense(self, h: int, w: int) -> np.ndarray:
        out = np.zeros(h * w)
        np.add.at(out, self.index, self.weight)
        return out.reshape(h, w)


def _axis_coords(u: np.ndarray, n: int):
    """Lower index, upper index, upper weight and d(weight)/du along one axis.

    ``u`` is in cell units relative to the first centre.  The lower index is
    capped at ``n - 2`` so the last centre is reached from the left segment.
    """
    uc = np.clip(u, 0.0, n - 1)
    inside = (u > 0.0) & (u < n - 1)
    if n == 1:
        i0 = np.zeros(u.shape, dtype=np.int64)
        return i0, i0, np.zeros(u.shape), np.zeros(u.shape)
    i0 = np.minimum(np.floor(uc).astype(np.int64), n - 2)
    frac = uc - i0
    dfrac = inside.astype(np.float64)
    return i0, i0 + 1, frac, dfrac


def _check_extent(xs, ys, h, w, stride):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise DomainError("non-finite sample point")
    if np.any(xs < 0) or np.any(ys < 0) or np.any(xs > w * stride) or np.any(ys > h * stride):
        raise DomainError("sample point outside the grid extent")


def stencils(h: int, w: int, stride: float, xs, ys, check: bool = True):
    """Vectorized interpolation stencils.

    Returns ``(index (N,4), weight (N,4), dweight_dx (N,4), dweight_dy (N,4))``;
    corner order is (top-left, top-right, bottom-left, bottom-right).
    """
    xs = np.atleast_1d(np.asarray(xs, dtype=np.float64))
    ys = np.atleast_1d(np.asarray(ys, dtype=np.float64))
    if check:
        _check_extent(xs, ys, h, w, stride)
    j0, j1, fx, dfx = _axis_coords(xs / stride - 0.5, w)
    i0, i1, fy, dfy = _axis_coords(ys / stride - 0.5, h)
    index = np.stack([i0 * w + j0, i0 * w + j1, i1 * w + j0, i1 * w + j1], axis=1)
    gx, gy = 1.0 - fx, 1.0 - fy
    weight = np.stack([gy * gx, gy * fx, fy * gx, fy * fx], axis=1)
    # d/dx of the weights; du/dx = 1/stride
    ddx = np.stack([-gy, gy, -fy, fy], axis=1) * (dfx / stride)[:, None]
    ddy = np.stack([-gx, -fx, gx, fx], axis=1) * (dfy / stride)[:, None]
    return index, weight, ddx, ddy


def bilinear(grid: FeatureGrid, point) -> tuple[np.ndarray, InterpStencil]:
    """Per-channel value at an image point plus the stencil that produced it."""
    _, h, w = grid.shape
    idx, wt, _, _ = stencils(h, w, grid.stride, [point[0]], [point[1]])
    flat = grid.values.reshape(grid.values.shape[0], -1)
    vals = (flat[:, idx[0]] * wt[0]).sum(axis=1)
    return vals, InterpStencil(idx[0], wt[0])


def bilinear_many(values: np.ndarray, stride: float, xs, ys, check: bool = True):
    """Read ``(C, N)`` values at N points; also returns ``(index, weight)`` stencils."""
    c, h, w = values.shape
    idx, wt, _, _ = stencils(h, w, stride, xs, ys, check=check)
    flat = values.reshape(c, -1)
    return np.einsum("cnk,nk->cn", flat[:, idx], wt), idx, wt


def scatter_stencil(grad_out: np.ndarray, index: np.ndarray, weight: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`bilinear_many`: scatter ``(C, N)`` upstream into ``(C, H, W)``."""
    c, h, w = shape
    out = np.zeros((c, h * w))
    contrib = grad_out[:, :, None] * weight[None]
    for k in range(index.shape[1]):
        np.add.at(out, (slice(None), index[:, k]), contrib[:, :, k])
    return out.reshape(c, h, w)


def bilinear_grad(grid: FeatureGrid, point):
    """Gradient of the bilinear readout.

    Returns ``(stencil, dpoint)`` where the stencil gives d(value)/d(cell) for
    every channel and ``dpoint`` is ``(C, 2)`` holding d(value)/d(x, y).  On a
    cell-centre gridline the segment starting at that cell is used.
    """
    _, h, w = grid.shape
    idx, wt, ddx, ddy = stencils(h, w, grid.stride, [point[0]], [point[1]])
    flat = grid.values.reshape(grid.values.shape[0], -1)
    corner = flat[:, idx[0]]
    dpoint = np.stack([corner @ ddx[0], corner @ ddy[0]], axis=1)
    return InterpStencil(idx[0], wt[0]), dpoint


def _roi_sample_points(grid_hw, stride, roi: Box, pool: int, samples_per_bin: int):
    if pool < 1 or samples_per_bin < 1:
        raise DomainError("pool and samples_per_bin must be >= 1")
    h, w = grid_hw
    ext_w, ext_h = w * stride, h * stride
    if roi.x2 <= 0 or roi.y2 <= 0 or roi.x1 >= ext_w or roi.y1 >= ext_h:
        raise DomainError(f"roi {roi.to_list()} does not intersect the grid extent")
    bw = roi.width / pool
    bh = roi.height / pool
    frac = (np.arange(pool * samples_per_bin) + 0.5) / samples_per_bin  # bin units
    xs = np.clip(roi.x1 + frac * bw, 0.0, ext_w)
    ys = np.clip(roi.y1 + frac * bh, 0.0, ext_h)
    return xs, ys


def roialign_matrix(grid_hw, stride, roi: Box, pool: int = 7, samples_per_bin: int = 2) -> np.ndarray:
    """Linear map from flattened cells ``(H*W)`` to flattened bins ``(pool*pool)``.

    Every row sums to one.  ``pooled = values.reshape(C, -1) @ M.T``.
    """
    h, w = grid_hw
    s = samples_per_bin
    xs, ys = _roi_sample_points(grid_hw, stride, roi, pool, s)
    jx0, jx1, fx, _ = _axis_coords(xs / stride - 0.5, w)
    iy0, iy1, fy, _ = _axis_coords(ys / stride - 0.5, h)
    # separable: per-axis (pool, n_cells) interpolation-and-average matrices
    ax = np.zeros((pool * s, w))
    np.add.at(ax, (np.arange(pool * s), jx0), 1.0 - fx)
    np.add.at(ax, (np.arange(pool * s), jx1), fx)
    ay = np.zeros((pool * s, h))
    np.add.at(ay, (np.arange(pool * s), iy0), 1.0 - fy)
    np.add.at(ay, (np.arange(pool * s), iy1), fy)
    ax = ax.reshape(pool, s, w).mean(axis=1)
    ay = ay.reshape(pool, s, h).mean(axis=1)
    # M[(py,px),(i,j)] = ay[py,i] * ax[px,j]
    return np.einsum("pi,qj->pqij", ay, ax).reshape(pool * pool, h * w)


def roialign(grid: FeatureGrid, roi: Box, pool: int = 7, samples_per_bin: int = 2) -> np.ndarray:
    """RoIAlign: each bin is the mean of ``samples_per_bin**2`` bilinear samples."""
    c, h, w = grid.shape
    m = roialign_matrix((h, w), grid.stride, roi, pool, samples_per_bin)
    return (grid.values.reshape(c, -1) @ m.T).reshape(c, pool, pool)


def roialign_grad(grid: FeatureGrid, roi: Box, pool: int = 7, samples_per_bin: int = 2) -> np.ndarray:
    """Jacobian d(pooled[c, p, q]) / d(grid[c, i, j]) as a ``(pool, pool, H, W)`` array.

    Channels do not mix, so the same spatial Jacobian applies to every channel.
    """
    _, h, w = grid.shape
    return roialign_matrix((h, w), grid.stride, roi, pool, samples_per_bin).reshape(pool, pool, h, w)


def roialign_backward(grid_shape, stride, roi: Box, upstream: np.ndarray, samples_per_bin: int = 2) -> np.ndarray:
    """Vector-Jacobian product: ``(C, pool, pool)`` upstream -> ``(C, H, W)``."""
    c, h, w = grid_shape
    pool = upstream.shape[-1]
    m = roialign_matrix((h, w), stride, roi, pool, samples_per_bin)
    return (upstream.reshape(c, -1) @ m).reshape(c, h, w)


def roipool(grid: FeatureGrid, roi: Box, pool: int = 7) -> np.ndarray:
    """Quantized max pooling over the cells each bin covers; empty bins read 0."""
    c, h, w = grid.shape
    s = grid.stride
    if roi.x2 <= 0 or roi.y2 <= 0 or roi.x1 >= w * s or roi.y1 >= h * s:
        raise DomainError(f"roi {roi.to_list()} does not intersect the grid extent")
    x0 = int(np.clip(math.floor(roi.x1 / s), 0, w - 1))
    y0 = int(np.clip(math.floor(roi.y1 / s), 0, h - 1))
    x1 = int(np.clip(math.ceil(roi.x2 / s), x0 + 1, w))
    y1 = int(np.clip(math.ceil(roi.y2 / s), y0 + 1, h))
    rw, rh = x1 - x0, y1 - y0
    out = np.zeros((c, pool, pool))
    for p in range(pool):
        ya = y0 + (p * rh) // pool
        yb = y0 + -((-(p + 1) * rh) // pool)
        for q in range(pool):
            xa = x0 + (q * rw) // pool
            xb = x0 + -((-(q + 1) * rw) // pool)
            if yb > ya and xb > xa:
                out[:, p, q] = grid.values[:, ya:yb, xa:xb].max(axis=(1, 2))
    return out
