"""Synthetic ground truth: procedural phantoms and random B-spline flows,
yielding registration pairs with known correspondence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fields
from .exceptions import InvalidArgumentError, ShapeError
from .grid import FlowField, GridSpec, Volume
from .metrics import LandmarkSet, SegmentationMask


@dataclass(frozen=True)
class BSplineFieldSpec:
    control_points: tuple[int, int, int] = (5, 5, 5)
    max_displacement: float = 12.0
    rng_seed: int = 0

    def __post_init__(self):
        if any(c < 2 for c in self.control_points):
            raise InvalidArgumentError("control grid needs >= 2 points per axis")
        if self.max_displacement < 0:
            raise InvalidArgumentError("max displacement must be >= 0")


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    blob_count: int = 6
    intensity_range: tuple[float, float] = (0.5, 1.0)
    rng_seed: int = 0
    # fine-scale texture riding on the structural blobs; without it large
    # smooth regions leave the flow unconstrained along intensity level sets
    texture_count: int = 400
    texture_amplitude: tuple[float, float] = (0.5, 1.0)
    texture_sigma: tuple[float, float] = (1.5, 3.0)

    def __post_init__(self):
        if self.blob_count < 1:
            raise InvalidArgumentError("blob count must be >= 1")
        if self.texture_count < 0:
            raise InvalidArgumentError("texture count must be >= 0")
        GridSpec(self.dims)  # validates dims


def _bspline_basis(t: np.ndarray) -> np.ndarray:
    """Uniform cubic B-spline weights for fractional offsets t in [0,1];
    returns (N, 4), nonnegative, summing to 1."""
    t2, t3 = t * t, t * t * t
    b0 = (1 - t) ** 3 / 6.0
    b1 = (3 * t3 - 6 * t2 + 4) / 6.0
    b2 = (-3 * t3 + 3 * t2 + 3 * t + 1) / 6.0
    b3 = t3 / 6.0
    return np.stack([b0, b1, b2, b3], axis=1)


def bspline_interpolate(control: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Dense field from control-point displacements (cx, cy, cz, 3) by cubic
    B-spline interpolation; edge control values are replicated so the basis
    keeps its partition of unity everywhere."""
    cdims = control.shape[:3]
    out = np.zeros(grid.dims + (3,))
    # map voxel coordinates onto the control lattice (corner aligned)
    axes = []
    for ax in range(3):
        x = np.arange(grid.dims[ax], dtype=np.float64)
        t = x * (cdims[ax] - 1) / (grid.dims[ax] - 1)
        i0 = np.minimum(np.floor(t).astype(np.intp), cdims[ax] - 2)
        frac = t - i0
        w = _bspline_basis(frac)  # (n, 4)
        idx = np.clip(i0[:, None] + np.arange(-1, 3)[None, :], 0, cdims[ax] - 1)
        axes.append((w, idx))
    wx, ix = axes[0]
    wy, iy = axes[1]
    wz, iz = axes[2]
    for a in range(4):
        for b in range(4):
            for c in range(4):
                ctrl = control[np.ix_(ix[:, a], iy[:, b], iz[:, c])]
                w = (
                    wx[:, a][:, None, None, None]
                    * wy[:, b][None, :, None, None]
                    * wz[:, c][None, None, :, None]
                )
                out += w * ctrl
    return out


def random_bspline_flow(spec: BSplineFieldSpec, grid: GridSpec) -> FlowField:
    """Control displacements drawn uniformly in [-max, +max]^3; the dense
    field is their cubic B-spline interpolation, so every component stays
    within the maximum displacement."""
    rng = np.random.default_rng(spec.rng_seed)
    control = rng.uniform(
        -spec.max_displacement, spec.max_displacement, size=spec.control_points + (3,)
    )
    return FlowField(grid, bspline_interpolate(control, grid))


def _add_blob(data: np.ndarray, center: np.ndarray, sigma: float, amp: float) -> None:
    """Accumulate one Gaussian blob, restricted to its 4.5-sigma box."""
    dims = data.shape
    lo = [max(int(np.ceil(c - 4.5 * sigma)), 0) for c in center]
    hi = [min(int(np.floor(c + 4.5 * sigma)) + 1, d) for c, d in zip(center, dims)]
    if any(a >= b for a, b in zip(lo, hi)):
        return
    ax = [np.arange(a, b, dtype=np.float64) - c for a, b, c in zip(lo, hi, center)]
    r2 = (
        ax[0][:, None, None] ** 2
        + ax[1][None, :, None] ** 2
        + ax[2][None, None, :] ** 2
    )
    data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] += amp * np.exp(-r2 / (2 * sigma * sigma))


def make_phantom(spec: PhantomSpec) -> tuple[Volume, SegmentationMask, LandmarkSet]:
    """Sum-of-Gaussian-blobs volume with fine-scale texture; mask = voxels
    above half max of the structural component; landmarks at structural blob
    centers.  Deterministic per seed."""
    rng = np.random.default_rng(spec.rng_seed)
    dims = np.asarray(spec.dims, dtype=np.float64)
    grid = GridSpec(spec.dims)
    lo, hi = spec.intensity_range
    data = np.zeros(spec.dims)
    landmarks = []
    for k in range(spec.blob_count):
        center = rng.uniform(0.28, 0.72, size=3) * (dims - 1)
        sigma = rng.uniform(0.08, 0.16) * dims.min()
        amp = rng.uniform(lo, hi)
        _add_blob(data, center, sigma, amp)
        landmarks.append((f"blob{k}", center))
    mask = data > 0.5 * data.max()
    for _ in range(spec.texture_count):
        center = rng.uniform(0.1, 0.9, size=3) * (dims - 1)
        sigma = rng.uniform(*spec.texture_sigma)
        amp = rng.uniform(*spec.texture_amplitude)
        _add_blob(data, center, sigma, amp)
    return (
        Volume(grid, data),
        SegmentationMask(grid, mask),
        LandmarkSet(tuple(landmarks)),
    )


@dataclass
class SyntheticPair:
    fixed: Volume
    moving: Volume
    ground_truth_flow: FlowField
    fixed_mask: SegmentationMask
    moving_mask: SegmentationMask
    fixed_landmarks: LandmarkSet
    moving_landmarks: LandmarkSet


def _sample_flow(flow: FlowField, p: np.ndarray) -> np.ndarray:
    from . import interp

    values, _ = interp.sample_forward(flow.data, p[None, :])
    return values[0]


def _invert_point(flow: FlowField, target: np.ndarray, iters: int = 50) -> np.ndarray:
    """Fixed-point solve of x + flow(x) = target for smooth flows."""
    hi = np.asarray(flow.grid.dims, dtype=np.float64) - 1.0
    x = target.copy()
    for _ in range(iters):
        x = np.clip(target - _sample_flow(flow, x), 0.0, hi)
    return x


def make_pair(
    phantom: tuple[Volume, SegmentationMask, LandmarkSet], flow: FlowField
) -> SyntheticPair:
    """Moving = phantom; fixed = phantom warped by the flow, so the flow is
    exactly the ground-truth flow from fixed to moving under the warp
    equation fixed(x) == moving(x + f(x))."""
    volume, mask, landmarks = phantom
    if volume.grid != flow.grid:
        raise ShapeError(f"grid mismatch: {volume.grid.dims} vs {flow.grid.dims}")
    from .metrics import warp_mask

    fixed = fields.warp_volume(volume, flow)
    fixed_mask = warp_mask(mask, flow)
    # phantom landmarks live in the moving frame; pull them back through the
    # flow to obtain the corresponding fixed-frame positions
    fixed_points = tuple(
        (name, _invert_point(flow, p)) for name, p in landmarks.points
    )
    return SyntheticPair(
        fixed=fixed,
        moving=volume,
        ground_truth_flow=flow,
        fixed_mask=fixed_mask,
        moving_mask=mask,
        fixed_landmarks=LandmarkSet(fixed_points),
        moving_landmarks=landmarks,
    )
