"""Sampling, warping and composition algebra on volumes and flow fields."""

from __future__ import annotations

import math

import numpy as np

from . import interp
from .exceptions import InvalidArgumentError, ShapeError
from .grid import AffineTransform, FlowField, GridSpec, RegionBox, Volume


def _require_same_grid(a, b):
    if a.grid != b.grid:
        raise ShapeError(f"grid mismatch: {a.grid.dims} vs {b.grid.dims}")


def trilinear_sample(v: Volume, p) -> float:
    """Value of the volume at a continuous point, clamped to the cuboid."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise InvalidArgumentError(f"query point must be a finite 3-vector, got {p!r}")
    values, _ = interp.sample_forward(v.data, p[None, :])
    return float(values[0, 0])


def warp_volume(v: Volume, f: FlowField) -> Volume:
    """Pull-back warp: output(x) = v(x + f(x))."""
    _require_same_grid(v, f)
    points = v.grid.coords().reshape(-1, 3) + f.data.reshape(-1, 3)
    values, _ = interp.sample_forward(v.data, points)
    return Volume(v.grid, values[:, 0].reshape(v.grid.dims))


def warp_flow(g1: FlowField, g2: FlowField) -> FlowField:
    """Componentwise warp of g1 at x + g2(x), same clamping as volumes."""
    _require_same_grid(g1, g2)
    points = g1.grid.coords().reshape(-1, 3) + g2.data.reshape(-1, 3)
    values, _ = interp.sample_forward(g1.data, points)
    return FlowField(g1.grid, values.reshape(g1.data.shape))


def compose_flows(g1: FlowField, g2: FlowField) -> FlowField:
    """Flow composition: warping by g1 then g2 equals warping by this."""
    _require_same_grid(g1, g2)
    return FlowField(g1.grid, g2.data + warp_flow(g1, g2).data)


def affine_to_flow(t: AffineTransform, grid: GridSpec) -> FlowField:
    """Dense flow f(x) = A x + b on the grid."""
    coords = grid.coords()
    data = coords @ t.A.T + t.b
    return FlowField(grid, data)


def compose_affine_with_flow(t: AffineTransform, f: FlowField) -> FlowField:
    """Closed-form (Ax + b) composed with f: (I + A) f + A x + b.

    Exact (no interpolation) because affine flows are linear in position.
    """
    coords = f.grid.coords()
    data = f.data @ (np.eye(3) + t.A).T + coords @ t.A.T + t.b
    return FlowField(f.grid, data)


def valid_domain(f: FlowField) -> np.ndarray:
    """Boolean mask of voxels whose displaced point stays inside the cuboid."""
    hi = np.asarray(f.grid.dims, dtype=np.float64) - 1.0
    displaced = f.grid.coords() + f.data
    return np.all((displaced >= 0.0) & (displaced <= hi), axis=-1)


def central_region(grid: GridSpec) -> RegionBox:
    """Box with the first and last quarters of each side removed."""
    if any(d < 4 for d in grid.dims):
        raise InvalidArgumentError(f"central region needs dims >= 4, got {grid.dims}")
    lower = tuple(math.ceil(d / 4) for d in grid.dims)
    upper = tuple(d - math.ceil(d / 4) for d in grid.dims)
    return RegionBox(lower, upper)


def _resample_maps(source: GridSpec, target: GridSpec):
    src = np.asarray(source.dims, dtype=np.float64)
    tgt = np.asarray(target.dims, dtype=np.float64)
    pos_scale = (src - 1.0) / (tgt - 1.0)
    disp_scale = tgt / src
    points = target.coords().reshape(-1, 3) * pos_scale
    return points, disp_scale


def resample_flow(f: FlowField, target: GridSpec) -> FlowField:
    """Resample a flow onto another grid, rescaling displacements to target
    voxel units by the per-axis grid-size ratio."""
    if f.grid == target:
        return f
    points, disp_scale = _resample_maps(f.grid, target)
    values, _ = interp.sample_forward(f.data, points)
    data = values.reshape(target.dims + (3,)) * disp_scale
    return FlowField(target, data)


def histogram_match(moving: Volume, reference: Volume, bins: int = 256) -> Volume:
    """Monotone intensity remap so the moving histogram matches the reference."""
    if bins < 2:
        raise InvalidArgumentError(f"bins must be >= 2, got {bins}")
    mov = moving.data.ravel()
    ref = reference.data.ravel()
    if np.ptp(mov) == 0.0 or np.ptp(ref) == 0.0:
        raise InvalidArgumentError("histogram matching needs non-constant volumes")

    m_edges = np.linspace(mov.min(), mov.max(), bins + 1)
    r_edges = np.linspace(ref.min(), ref.max(), bins + 1)
    m_cdf = np.cumsum(np.histogram(mov, bins=m_edges)[0]) / mov.size
    r_cdf = np.cumsum(np.histogram(ref, bins=r_edges)[0]) / ref.size

    # CDF value of each moving voxel, then inverse reference CDF
    q = np.interp(mov, m_edges[1:], m_cdf)
    matched = np.interp(q, r_cdf, r_edges[1:])
    return Volume(moving.grid, matched.reshape(moving.grid.dims))
