"""Trilinear interpolation kernels shared by the field ops and the tape.

Query points are clamped componentwise to the grid cuboid before
interpolation (nearest-point extension of the lattice function).  The
forward pass captures the cell/fraction context needed by the two
adjoints: scatter into the source array, and the derivative of the
interpolated value w.r.t. the query point (zero along any clamped axis).

Kernels are numba-compiled with sequential accumulation, so results are
bitwise deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange


@dataclass
class InterpPlan:
    """Per-query context captured by the forward pass."""

    shape: tuple               # original source shape
    dims: np.ndarray           # int64 (3,)
    src2d: np.ndarray          # source flattened to (nvox, C)
    cell: np.ndarray           # lower-corner cell index, (N, 3) int64
    frac: np.ndarray           # fractional position inside the cell, (N, 3)
    inbound: np.ndarray        # 1.0 where the raw query was inside [0, d-1], (N, 3)


@njit(cache=True, parallel=True)
def _forward_kernel(src, dims, pts, out, cell, frac, inbound):
    n = pts.shape[0]
    nch = src.shape[1]
    sx = dims[1] * dims[2]
    sy = dims[2]
    # every iteration writes only row i, so the parallel schedule cannot
    # change the result
    for i in prange(n):
        for a in range(3):
            hi = dims[a] - 1.0
            p = pts[i, a]
            if 0.0 <= p <= hi:
                inbound[i, a] = 1.0
            else:
                inbound[i, a] = 0.0
                if p < 0.0:
                    p = 0.0
                else:
                    p = hi
            c = int(np.floor(p))
            if c > dims[a] - 2:
                c = dims[a] - 2
            cell[i, a] = c
            frac[i, a] = p - c
        tx, ty, tz = frac[i, 0], frac[i, 1], frac[i, 2]
        base = cell[i, 0] * sx + cell[i, 1] * sy + cell[i, 2]
        ux, uy, uz = 1.0 - tx, 1.0 - ty, 1.0 - tz
        w000 = ux * uy * uz
        w001 = ux * uy * tz
        w010 = ux * ty * uz
        w011 = ux * ty * tz
        w100 = tx * uy * uz
        w101 = tx * uy * tz
        w110 = tx * ty * uz
        w111 = tx * ty * tz
        for ch in range(nch):
            out[i, ch] = (
                w000 * src[base, ch]
                + w001 * src[base + 1, ch]
                + w010 * src[base + sy, ch]
                + w011 * src[base + sy + 1, ch]
                + w100 * src[base + sx, ch]
                + w101 * src[base + sx + 1, ch]
                + w110 * src[base + sx + sy, ch]
                + w111 * src[base + sx + sy + 1, ch]
            )


# scatter accumulation stays sequential so the summation order is fixed
@njit(cache=True)
def _adjoint_source_kernel(dims, cell, frac, grad_values, out):
    n = cell.shape[0]
    nch = grad_values.shape[1]
    sx = dims[1] * dims[2]
    sy = dims[2]
    for i in range(n):
        tx, ty, tz = frac[i, 0], frac[i, 1], frac[i, 2]
        base = cell[i, 0] * sx + cell[i, 1] * sy + cell[i, 2]
        ux, uy, uz = 1.0 - tx, 1.0 - ty, 1.0 - tz
        w000 = ux * uy * uz
        w001 = ux * uy * tz
        w010 = ux * ty * uz
        w011 = ux * ty * tz
        w100 = tx * uy * uz
        w101 = tx * uy * tz
        w110 = tx * ty * uz
        w111 = tx * ty * tz
        for ch in range(nch):
            g = grad_values[i, ch]
            out[base, ch] += w000 * g
            out[base + 1, ch] += w001 * g
            out[base + sy, ch] += w010 * g
            out[base + sy + 1, ch] += w011 * g
            out[base + sx, ch] += w100 * g
            out[base + sx + 1, ch] += w101 * g
            out[base + sx + sy, ch] += w110 * g
            out[base + sx + sy + 1, ch] += w111 * g


@njit(cache=True, parallel=True)
def _adjoint_points_kernel(src, dims, cell, frac, inbound, grad_values, out):
    n = cell.shape[0]
    nch = grad_values.shape[1]
    sx = dims[1] * dims[2]
    sy = dims[2]
    for i in prange(n):
        tx, ty, tz = frac[i, 0], frac[i, 1], frac[i, 2]
        base = cell[i, 0] * sx + cell[i, 1] * sy + cell[i, 2]
        ux, uy, uz = 1.0 - tx, 1.0 - ty, 1.0 - tz
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for ch in range(nch):
            v000 = src[base, ch]
            v001 = src[base + 1, ch]
            v010 = src[base + sy, ch]
            v011 = src[base + sy + 1, ch]
            v100 = src[base + sx, ch]
            v101 = src[base + sx + 1, ch]
            v110 = src[base + sx + sy, ch]
            v111 = src[base + sx + sy + 1, ch]
            g = grad_values[i, ch]
            gx += g * (
                (v100 - v000) * uy * uz
                + (v110 - v010) * ty * uz
                + (v101 - v001) * uy * tz
                + (v111 - v011) * ty * tz
            )
            gy += g * (
                (v010 - v000) * ux * uz
                + (v110 - v100) * tx * uz
                + (v011 - v001) * ux * tz
                + (v111 - v101) * tx * tz
            )
            gz += g * (
                (v001 - v000) * ux * uy
                + (v101 - v100) * tx * uy
                + (v011 - v010) * ux * ty
                + (v111 - v110) * tx * ty
            )
        out[i, 0] = gx * inbound[i, 0]
        out[i, 1] = gy * inbound[i, 1]
        out[i, 2] = gz * inbound[i, 2]


@njit(cache=True)
def _adjoint_pair_kernel(src, dims, cell, frac, inbound, grad_values, out_src, out_pts):
    """Both sampling adjoints in one pass (shared weights and corner reads).

    The source scatter keeps a fixed accumulation order, so the kernel stays
    sequential."""
    n = cell.shape[0]
    nch = grad_values.shape[1]
    sx = dims[1] * dims[2]
    sy = dims[2]
    for i in range(n):
        tx, ty, tz = frac[i, 0], frac[i, 1], frac[i, 2]
        base = cell[i, 0] * sx + cell[i, 1] * sy + cell[i, 2]
        ux, uy, uz = 1.0 - tx, 1.0 - ty, 1.0 - tz
        w000 = ux * uy * uz
        w001 = ux * uy * tz
        w010 = ux * ty * uz
        w011 = ux * ty * tz
        w100 = tx * uy * uz
        w101 = tx * uy * tz
        w110 = tx * ty * uz
        w111 = tx * ty * tz
        gx = 0.0
        gy = 0.0
        gz = 0.0
        for ch in range(nch):
            g = grad_values[i, ch]
            out_src[base, ch] += w000 * g
            out_src[base + 1, ch] += w001 * g
            out_src[base + sy, ch] += w010 * g
            out_src[base + sy + 1, ch] += w011 * g
            out_src[base + sx, ch] += w100 * g
            out_src[base + sx + 1, ch] += w101 * g
            out_src[base + sx + sy, ch] += w110 * g
            out_src[base + sx + sy + 1, ch] += w111 * g
            v000 = src[base, ch]
            v001 = src[base + 1, ch]
            v010 = src[base + sy, ch]
            v011 = src[base + sy + 1, ch]
            v100 = src[base + sx, ch]
            v101 = src[base + sx + 1, ch]
            v110 = src[base + sx + sy, ch]
            v111 = src[base + sx + sy + 1, ch]
            gx += g * (
                (v100 - v000) * uy * uz
                + (v110 - v010) * ty * uz
                + (v101 - v001) * uy * tz
                + (v111 - v011) * ty * tz
            )
            gy += g * (
                (v010 - v000) * ux * uz
                + (v110 - v100) * tx * uz
                + (v011 - v001) * ux * tz
                + (v111 - v101) * tx * tz
            )
            gz += g * (
                (v001 - v000) * ux * uy
                + (v101 - v100) * tx * uy
                + (v011 - v010) * ux * ty
                + (v111 - v110) * tx * ty
            )
        out_pts[i, 0] = gx * inbound[i, 0]
        out_pts[i, 1] = gy * inbound[i, 1]
        out_pts[i, 2] = gz * inbound[i, 2]


def sample_forward(source: np.ndarray, points: np.ndarray) -> tuple[np.ndarray, InterpPlan]:
    """Sample ``source`` (nx, ny, nz[, C]) at ``points`` (N, 3).

    Returns values (N, C) and the plan for the adjoints.
    """
    shape = source.shape
    src2d = np.ascontiguousarray(source.reshape(shape[0] * shape[1] * shape[2], -1))
    dims = np.asarray(shape[:3], dtype=np.int64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    out = np.empty((n, src2d.shape[1]))
    cell = np.empty((n, 3), dtype=np.int64)
    frac = np.empty((n, 3))
    inbound = np.empty((n, 3))
    _forward_kernel(src2d, dims, points, out, cell, frac, inbound)
    return out, InterpPlan(shape, dims, src2d, cell, frac, inbound)


def sample_adjoint_source(plan: InterpPlan, grad_values: np.ndarray) -> np.ndarray:
    """Adjoint w.r.t. the source array; returns the original source shape."""
    grad_values = np.ascontiguousarray(grad_values)
    out = np.zeros_like(plan.src2d)
    _adjoint_source_kernel(plan.dims, plan.cell, plan.frac, grad_values, out)
    return out.reshape(plan.shape)


def sample_adjoint_points(plan: InterpPlan, grad_values: np.ndarray) -> np.ndarray:
    """Adjoint w.r.t. the query points, (N, 3); zero along clamped axes."""
    grad_values = np.ascontiguousarray(grad_values)
    out = np.empty((plan.cell.shape[0], 3))
    _adjoint_points_kernel(
        plan.src2d, plan.dims, plan.cell, plan.frac, plan.inbound, grad_values, out
    )
    return out


def sample_adjoint_pair(plan: InterpPlan, grad_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Source and point adjoints computed together (one pass)."""
    grad_values = np.ascontiguousarray(grad_values)
    out_src = np.zeros_like(plan.src2d)
    out_pts = np.empty((plan.cell.shape[0], 3))
    _adjoint_pair_kernel(
        plan.src2d, plan.dims, plan.cell, plan.frac, plan.inbound,
        grad_values, out_src, out_pts,
    )
    return out_src.reshape(plan.shape), out_pts


# --------------------------------------------------------------------------
# Corner-aligned trilinear resizing (separable; used to lift coarse fields)


@njit(cache=True, parallel=True)
def _resize_x(src, out):
    sn, ny, nz, nc = src.shape
    tn = out.shape[0]
    scale = (sn - 1.0) / (tn - 1.0)
    for i in prange(tn):
        p = i * scale
        c = min(int(p), sn - 2)
        t = p - c
        u = 1.0 - t
        for j in range(ny):
            for k in range(nz):
                for ch in range(nc):
                    out[i, j, k, ch] = u * src[c, j, k, ch] + t * src[c + 1, j, k, ch]


@njit(cache=True, parallel=True)
def _resize_y(src, out):
    nx, sn, nz, nc = src.shape
    tn = out.shape[1]
    scale = (sn - 1.0) / (tn - 1.0)
    for i in prange(nx):
        for j in range(tn):
            p = j * scale
            c = min(int(p), sn - 2)
            t = p - c
            u = 1.0 - t
            for k in range(nz):
                for ch in range(nc):
                    out[i, j, k, ch] = u * src[i, c, k, ch] + t * src[i, c + 1, k, ch]


@njit(cache=True, parallel=True)
def _resize_z(src, out):
    nx, ny, sn, nc = src.shape
    tn = out.shape[2]
    scale = (sn - 1.0) / (tn - 1.0)
    for i in prange(nx):
        for j in range(ny):
            for k in range(tn):
                p = k * scale
                c = min(int(p), sn - 2)
                t = p - c
                u = 1.0 - t
                for ch in range(nc):
                    out[i, j, k, ch] = u * src[i, j, c, ch] + t * src[i, j, c + 1, ch]


# Adjoints scatter along the resized axis; parallelizing over a different
# axis keeps every accumulation order fixed.


@njit(cache=True, parallel=True)
def _resize_x_adj(grad, out):
    tn, ny, nz, nc = grad.shape
    sn = out.shape[0]
    scale = (sn - 1.0) / (tn - 1.0)
    for j in prange(ny):
        for i in range(tn):
            p = i * scale
            c = min(int(p), sn - 2)
            t = p - c
            u = 1.0 - t
            for k in range(nz):
                for ch in range(nc):
                    g = grad[i, j, k, ch]
                    out[c, j, k, ch] += u * g
                    out[c + 1, j, k, ch] += t * g


@njit(cache=True, parallel=True)
def _resize_y_adj(grad, out):
    nx, tn, nz, nc = grad.shape
    sn = out.shape[1]
    scale = (sn - 1.0) / (tn - 1.0)
    for i in prange(nx):
        for j in range(tn):
            p = j * scale
            c = min(int(p), sn - 2)
            t = p - c
            u = 1.0 - t
            for k in range(nz):
                for ch in range(nc):
                    g = grad[i, j, k, ch]
                    out[i, c, k, ch] += u * g
                    out[i, c + 1, k, ch] += t * g


@njit(cache=True, parallel=True)
def _resize_z_adj(grad, out):
    nx, ny, tn, nc = grad.shape
    sn = out.shape[2]
    scale = (sn - 1.0) / (tn - 1.0)
    for i in prange(nx):
        for j in range(ny):
            for k in range(tn):
                p = k * scale
                c = min(int(p), sn - 2)
                t = p - c
                u = 1.0 - t
                for ch in range(nc):
                    g = grad[i, j, k, ch]
                    out[i, j, c, ch] += u * g
                    out[i, j, c + 1, ch] += t * g


def resize_field(src: np.ndarray, tgt_dims: tuple) -> np.ndarray:
    """Corner-aligned trilinear resize of (nx, ny, nz, C) applied axis by
    axis; identical to trilinear sampling at the corner-aligned positions."""
    src = np.ascontiguousarray(src)
    if src.shape[:3] == tuple(tgt_dims):
        return src.copy()
    out = np.empty((tgt_dims[0],) + src.shape[1:])
    _resize_x(src, out)
    src = out
    out = np.empty(src.shape[:1] + (tgt_dims[1],) + src.shape[2:])
    _resize_y(src, out)
    src = out
    out = np.empty(src.shape[:2] + (tgt_dims[2],) + src.shape[3:])
    _resize_z(src, out)
    return out


def resize_field_adjoint(grad: np.ndarray, src_dims: tuple) -> np.ndarray:
    """Adjoint of ``resize_field``: the per-axis linear maps transposed, in
    reverse order."""
    grad = np.ascontiguousarray(grad)
    if grad.shape[:3] == tuple(src_dims):
        return grad.copy()
    out = np.zeros(grad.shape[:2] + (src_dims[2],) + grad.shape[3:])
    _resize_z_adj(grad, out)
    grad = out
    out = np.zeros(grad.shape[:1] + (src_dims[1],) + grad.shape[2:])
    _resize_y_adj(grad, out)
    grad = out
    out = np.zeros((src_dims[0],) + grad.shape[1:])
    _resize_x_adj(grad, out)
    return out
