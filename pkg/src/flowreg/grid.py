"""Core domain types: grids, volumes, flow fields, affine transforms, regions.

Coordinates are zero-based lattice indices; the image domain is the cuboid
[0, nx-1] x [0, ny-1] x [0, nz-1] in voxel units (unit spacing).  Arrays are
indexed ``data[x, y, z]``; flow fields carry a trailing component axis.
All types are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidArgumentError, ShapeError


@dataclass(frozen=True)
class GridSpec:
    dims: tuple[int, int, int]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 2 for d in dims):
            raise InvalidArgumentError(f"grid dims must be >= 2 per axis, got {self.dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def coords(self) -> np.ndarray:
        """Lattice coordinates, shape (nx, ny, nz, 3)."""
        nx, ny, nz = self.dims
        gx, gy, gz = np.meshgrid(
            np.arange(nx, dtype=np.float64),
            np.arange(ny, dtype=np.float64),
            np.arange(nz, dtype=np.float64),
            indexing="ij",
        )
        return np.stack([gx, gy, gz], axis=-1)


@dataclass(frozen=True)
class Volume:
    grid: GridSpec
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != self.grid.dims:
            raise ShapeError(f"volume data shape {data.shape} != grid dims {self.grid.dims}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("volume data contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, data: np.ndarray) -> "Volume":
        data = np.asarray(data, dtype=np.float64)
        return cls(GridSpec(data.shape), data)


@dataclass(frozen=True)
class FlowField:
    grid: GridSpec
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != self.grid.dims + (3,):
            raise ShapeError(f"flow data shape {data.shape} != {self.grid.dims + (3,)}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("flow data contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def zeros(cls, grid: GridSpec) -> "FlowField":
        return cls(grid, np.zeros(grid.dims + (3,)))

    @classmethod
    def from_array(cls, data: np.ndarray) -> "FlowField":
        data = np.asarray(data, dtype=np.float64)
        return cls(GridSpec(data.shape[:3]), data)


@dataclass(frozen=True)
class AffineTransform:
    """Transform whose flow is f(x) = A x + b (so the map is x + f(x))."""

    A: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if A.shape != (3, 3) or b.shape != (3,):
            raise ShapeError(f"expected A (3,3) and b (3,), got {A.shape}, {b.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise InvalidArgumentError("affine parameters contain non-finite values")
        A.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.zeros((3, 3)), np.zeros(3))

    @classmethod
    def from_params(cls, params: np.ndarray) -> "AffineTransform":
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (12,):
            raise ShapeError(f"expected 12 affine parameters, got shape {params.shape}")
        return cls(params[:9].reshape(3, 3), params[9:])

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.b])


@dataclass(frozen=True)
class RegionBox:
    """Half-open index box: lower inclusive, upper exclusive."""

    lower: tuple[int, int, int]
    upper: tuple[int, int, int]

    def __post_init__(self):
        lower = tuple(int(v) for v in self.lower)
        upper = tuple(int(v) for v in self.upper)
        if any(lo >= hi for lo, hi in zip(lower, upper)):
            raise InvalidArgumentError(f"empty region box {lower}..{upper}")
        if any(lo < 0 for lo in lower):
            raise InvalidArgumentError(f"region box below origin: {lower}")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    def check_within(self, grid: GridSpec) -> None:
        if any(hi > d for hi, d in zip(self.upper, grid.dims)):
            raise ShapeError(f"region {self.lower}..{self.upper} exceeds grid {grid.dims}")

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(lo, hi) for lo, hi in zip(self.lower, self.upper))

    @property
    def voxel_count(self) -> int:
        return int(np.prod([hi - lo for lo, hi in zip(self.lower, self.upper)]))
