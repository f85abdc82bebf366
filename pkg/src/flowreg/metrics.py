"""Evaluation measures: overlap, landmark distance, endpoint error,
Jacobian smoothness and folding statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fields, interp
from .exceptions import DegenerateInputError, InvalidArgumentError, ShapeError
from .grid import FlowField, GridSpec, RegionBox, Volume


@dataclass(frozen=True)
class SegmentationMask:
    grid: GridSpec
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=bool)
        if data.shape != self.grid.dims:
            raise ShapeError(f"mask shape {data.shape} != grid dims {self.grid.dims}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, data) -> "SegmentationMask":
        data = np.asarray(data, dtype=bool)
        return cls(GridSpec(data.shape), data)


@dataclass(frozen=True)
class LandmarkSet:
    """Named points in voxel coordinates."""

    points: tuple  # of (name, np.ndarray shape (3,))

    def __post_init__(self):
        seen = set()
        pts = []
        for name, p in self.points:
            if name in seen:
                raise InvalidArgumentError(f"duplicate landmark name {name!r}")
            seen.add(name)
            p = np.asarray(p, dtype=np.float64)
            if p.shape != (3,) or not np.all(np.isfinite(p)):
                raise InvalidArgumentError(f"bad landmark position for {name!r}")
            p.setflags(write=False)
            pts.append((str(name), p))
        object.__setattr__(self, "points", tuple(pts))

    def names(self):
        return [n for n, _ in self.points]

    def position(self, name: str) -> np.ndarray:
        for n, p in self.points:
            if n == name:
                return p
        raise KeyError(name)


def seg_iou(a: SegmentationMask, b: SegmentationMask) -> float:
    if a.grid != b.grid:
        raise ShapeError(f"grid mismatch: {a.grid.dims} vs {b.grid.dims}")
    union = np.logical_or(a.data, b.data).sum()
    if union == 0:
        raise DegenerateInputError("IoU undefined for two empty masks")
    inter = np.logical_and(a.data, b.data).sum()
    return float(inter / union)


def warp_mask(m: SegmentationMask, f: FlowField) -> SegmentationMask:
    """Warp the mask as a 0/1 volume and threshold at 0.5."""
    if m.grid != f.grid:
        raise ShapeError(f"grid mismatch: {m.grid.dims} vs {f.grid.dims}")
    vol = Volume(m.grid, m.data.astype(np.float64))
    warped = fields.warp_volume(vol, f)
    return SegmentationMask(m.grid, warped.data > 0.5)


def landmark_distance(moving: LandmarkSet, fixed: LandmarkSet, f: FlowField) -> float:
    """Mean distance between fixed landmarks displaced by the flow and the
    corresponding moving landmarks; the flow is sampled trilinearly."""
    if sorted(moving.names()) != sorted(fixed.names()):
        raise InvalidArgumentError("landmark name sets differ")
    dists = []
    for name, p_fixed in fixed.points:
        disp, _ = interp.sample_forward(f.data, p_fixed[None, :])
        warped = p_fixed + disp[0]
        dists.append(np.linalg.norm(warped - moving.position(name)))
    return float(np.mean(dists))


def endpoint_error(f: FlowField, g: FlowField, region: RegionBox | None = None) -> float:
    """Mean Euclidean norm of f - g over the region (whole grid if None)."""
    if f.grid != g.grid:
        raise ShapeError(f"grid mismatch: {f.grid.dims} vs {g.grid.dims}")
    diff = f.data - g.data
    if region is not None:
        region.check_within(f.grid)
        diff = diff[region.slices()]
    return float(np.mean(np.linalg.norm(diff, axis=-1)))


def jacobian_stats(f: FlowField) -> tuple[float, float]:
    """(population std of det(I + grad f), fraction of voxels with det < 0).

    Central differences in the interior, one-sided at the faces.
    """
    if any(d < 3 for d in f.grid.dims):
        raise InvalidArgumentError(f"jacobian stats need dims >= 3, got {f.grid.dims}")
    grads = np.empty(f.grid.dims + (3, 3))
    for comp in range(3):
        gx, gy, gz = np.gradient(f.data[..., comp], edge_order=1)
        grads[..., comp, 0] = gx
        grads[..., comp, 1] = gy
        grads[..., comp, 2] = gz
    jac = grads + np.eye(3)
    det = np.linalg.det(jac)
    return float(det.std()), float(np.mean(det < 0))
