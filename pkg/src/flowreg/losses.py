"""Similarity and regularization losses.

Every loss exists in two layers: a tape-level builder operating on
``autodiff.Node`` values (used inside optimized pipelines) and a plain
function over the domain types that evaluates the same graph on constants.
Natural logarithm throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from . import autodiff as ad
from .exceptions import DegenerateInputError, InvalidArgumentError, ShapeError
from .grid import AffineTransform, FlowField, GridSpec, RegionBox, Volume


@dataclass(frozen=True)
class EntropyConfig:
    kernel_bandwidth: float = 10.0
    sample_count: int = 4096
    rng_seed: int = 0

    def __post_init__(self):
        if not self.kernel_bandwidth > 0:
            raise InvalidArgumentError("kernel_bandwidth must be positive")
        if self.sample_count < 2:
            raise InvalidArgumentError("sample_count must be >= 2")


@dataclass(frozen=True)
class LossWeights:
    """Per-stage weights plus affine extras and the global invertibility weight."""

    similarity: float = 1.0
    regularizer: float = 1.0
    determinant: float = 0.0
    orthogonality: float = 0.0

    def __post_init__(self):
        vals = (self.similarity, self.regularizer, self.determinant, self.orthogonality)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise InvalidArgumentError(f"loss weights must be finite and non-negative: {vals}")


def _require_same_grid(a, b):
    if a.grid != b.grid:
        raise ShapeError(f"grid mismatch: {a.grid.dims} vs {b.grid.dims}")


# --------------------------------------------------------------------------
# Node-level builders


def covariance_node(i1: ad.Node, i2: ad.Node) -> ad.Node:
    return (i1 * i2).mean() - i1.mean() * i2.mean()


@njit(cache=True)
def _corr_stats(x, y):
    n = x.size
    sx = sy = sxx = syy = sxy = 0.0
    for i in range(n):
        xi, yi = x[i], y[i]
        sx += xi
        sy += yi
        sxx += xi * xi
        syy += yi * yi
        sxy += xi * yi
    xbar, ybar = sx / n, sy / n
    return xbar, ybar, sxx / n - xbar * xbar, syy / n - ybar * ybar, sxy / n - xbar * ybar


@njit(cache=True, parallel=True)
def _corr_grad(x, y, xbar, ybar, cov_over_var, inv_denom, out):
    # d(1 - corr)/dx_i = -(yc_i - (cov/var_x) xc_i) / (n sqrt(var_x var_y))
    for i in prange(x.size):
        out[i] = -((y[i] - ybar) - cov_over_var * (x[i] - xbar)) * inv_denom


def correlation_loss_node(i1: ad.Node, i2: ad.Node) -> ad.Node:
    """1 - Pearson correlation, as a single fused primitive."""
    i1, i2 = ad.as_node(i1), ad.as_node(i2)
    x = np.ascontiguousarray(i1.value).ravel()
    y = np.ascontiguousarray(i2.value).ravel()
    xbar, ybar, v1, v2, cov = _corr_stats(x, y)
    scale = max(xbar * xbar + v1, ybar * ybar + v2, 1.0)
    if v1 <= 1e-15 * scale or v2 <= 1e-15 * scale:
        raise DegenerateInputError("correlation undefined for (near-)constant volume")
    denom = x.size * np.sqrt(v1 * v2)
    parents = []

    def vjp(a, b, abar, bbar, va, shape):
        def run(g):
            out = np.empty(a.size)
            _corr_grad(a, b, abar, bbar, cov / va, float(g) / denom, out)
            return out.reshape(shape)

        return run

    if i1.requires_grad:
        parents.append((i1, vjp(x, y, xbar, ybar, v1, i1.value.shape)))
    if i2.requires_grad:
        parents.append((i2, vjp(y, x, ybar, xbar, v2, i2.value.shape)))
    value = np.float64(1.0 - cov / np.sqrt(v1 * v2))
    return ad.Node(value, tuple(parents), "correlation")


def l2_loss_node(i1: ad.Node, i2: ad.Node) -> ad.Node:
    return ((i1 - i2) ** 2).mean()


@njit(cache=True)
def _tv_value(f):
    nx, ny, nz, nc = f.shape
    total = 0.0
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                for c in range(nc):
                    v = f[x, y, z, c]
                    if x + 1 < nx:
                        d = f[x + 1, y, z, c] - v
                        total += d * d
                    if y + 1 < ny:
                        d = f[x, y + 1, z, c] - v
                        total += d * d
                    if z + 1 < nz:
                        d = f[x, y, z + 1, c] - v
                        total += d * d
    return total


@njit(cache=True, parallel=True)
def _tv_grad(f, coef, out):
    nx, ny, nz, nc = f.shape
    for x in prange(nx):
        for y in range(ny):
            for z in range(nz):
                for c in range(nc):
                    v = f[x, y, z, c]
                    acc = 0.0
                    if x > 0:
                        acc += v - f[x - 1, y, z, c]
                    if x + 1 < nx:
                        acc -= f[x + 1, y, z, c] - v
                    if y > 0:
                        acc += v - f[x, y - 1, z, c]
                    if y + 1 < ny:
                        acc -= f[x, y + 1, z, c] - v
                    if z > 0:
                        acc += v - f[x, y, z - 1, c]
                    if z + 1 < nz:
                        acc -= f[x, y, z + 1, c] - v
                    out[x, y, z, c] = coef * acc


def total_variation_loss_node(f: ad.Node) -> ad.Node:
    """f shaped (nx, ny, nz, 3); forward differences, squared, averaged as
    sum / (3 |Omega|); out-of-grid neighbors are skipped.  Fused primitive."""
    f = ad.as_node(f)
    arr = np.ascontiguousarray(f.value)
    n_vox = int(np.prod(arr.shape[:3]))
    value = np.float64(_tv_value(arr) / (3.0 * n_vox))
    parents = []
    if f.requires_grad:

        def vjp(g):
            out = np.empty_like(arr)
            _tv_grad(arr, 2.0 * float(g) / (3.0 * n_vox), out)
            return out

        parents.append((f, vjp))
    return ad.Node(value, tuple(parents), "total_variation")


def _det3_node(m: ad.Node) -> ad.Node:
    a, b, c = m[0, 0], m[0, 1], m[0, 2]
    d, e, f = m[1, 0], m[1, 1], m[1, 2]
    g, h, i = m[2, 0], m[2, 1], m[2, 2]
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def _trace_node(m: ad.Node) -> ad.Node:
    return m[0, 0] + m[1, 1] + m[2, 2]


def determinant_loss_node(a_mat: ad.Node) -> ad.Node:
    """(det(I + A) - 1)^2 for the 3x3 matrix node A."""
    return (_det3_node(a_mat + np.eye(3)) - 1.0) ** 2


def orthogonality_loss_node(a_mat: ad.Node) -> ad.Node:
    """-6 + sum(s_i^2 + s_i^-2) over the singular values of I + A, computed
    from the characteristic polynomial of (I+A)^T (I+A): with elementary
    symmetric polynomials e1, e2, e3 of its eigenvalues the loss is
    e1 + e2/e3 - 6."""
    b = a_mat + np.eye(3)
    det_b = float(np.linalg.det(b.value))
    if abs(det_b) < 1e-12:
        from .exceptions import SingularTransformError

        raise SingularTransformError("I + A is singular; orthogonality loss undefined")
    m = ad.matmul(ad.transpose(b), b)
    e1 = _trace_node(m)
    e2 = (e1 * e1 - _trace_node(ad.matmul(m, m))) * 0.5
    e3 = _det3_node(m)
    return e1 + e2 / e3 - 6.0


def compose_flows_node(g1: ad.Node, g2: ad.Node, coords_flat: np.ndarray) -> ad.Node:
    """g1 * g2 = g2 + g1 warped by g2 on nodes shaped (nx, ny, nz, 3)."""
    pts = g2.reshape(-1, 3) + coords_flat
    warped = ad.sample(g1, pts)
    return g2 + warped.reshape(g1.value.shape)


def invertibility_loss_node(
    f12: ad.Node, f21: ad.Node, region: RegionBox, coords_flat: np.ndarray
) -> ad.Node:
    sl = region.slices()

    def half(a, b):
        comp = compose_flows_node(a, b, coords_flat)
        crop = comp[sl]
        return (crop * crop).sum(axis=-1).mean()

    return half(f12, f21) + half(f21, f12)


def entropy_node(samples: ad.Node, lam: float) -> ad.Node:
    """Kernel-relaxed plug-in entropy of a 1-D sample node."""
    n = samples.value.size
    col = samples.reshape(n, 1)
    row = samples.reshape(1, n)
    k = ad.exp(ad.absolute(col - row) * (-lam))
    return -ad.log(k.mean(axis=1)).mean()


def joint_entropy_node(x: ad.Node, y: ad.Node, lam: float) -> ad.Node:
    n = x.value.size
    kx = ad.exp(ad.absolute(x.reshape(n, 1) - x.reshape(1, n)) * (-lam))
    ky = ad.exp(ad.absolute(y.reshape(n, 1) - y.reshape(1, n)) * (-lam))
    return -ad.log((kx * ky).mean(axis=1)).mean()


def mutual_information_loss_node(i1: ad.Node, i2: ad.Node, cfg: EntropyConfig) -> ad.Node:
    """Negated kernel-relaxed mutual information; same seeded location
    subsample for the three entropy terms."""
    x = i1.reshape(-1)
    y = i2.reshape(-1)
    n = x.value.size
    if n > cfg.sample_count:
        idx = np.random.default_rng(cfg.rng_seed).choice(n, cfg.sample_count, replace=False)
        x, y = x[idx], y[idx]
    lam = cfg.kernel_bandwidth
    mi = entropy_node(x, lam) + entropy_node(y, lam) - joint_entropy_node(x, y, lam)
    return -mi


# --------------------------------------------------------------------------
# Plain functions over domain types


def covariance(i1: Volume, i2: Volume) -> float:
    _require_same_grid(i1, i2)
    return float(covariance_node(ad.constant(i1.data), ad.constant(i2.data)).value)


def correlation_loss(i1: Volume, i2: Volume) -> float:
    _require_same_grid(i1, i2)
    return float(correlation_loss_node(ad.constant(i1.data), ad.constant(i2.data)).value)


def l2_loss(i1: Volume, i2: Volume) -> float:
    _require_same_grid(i1, i2)
    return float(l2_loss_node(ad.constant(i1.data), ad.constant(i2.data)).value)


def total_variation_loss(f: FlowField) -> float:
    return float(total_variation_loss_node(ad.constant(f.data)).value)


def orthogonality_loss(t: AffineTransform) -> float:
    return float(orthogonality_loss_node(ad.constant(t.A)).value)


def determinant_loss(t: AffineTransform) -> float:
    return float(determinant_loss_node(ad.constant(t.A)).value)


def invertibility_loss(f12: FlowField, f21: FlowField, region: RegionBox) -> float:
    _require_same_grid(f12, f21)
    region.check_within(f12.grid)
    coords_flat = f12.grid.coords().reshape(-1, 3)
    node = invertibility_loss_node(
        ad.constant(f12.data), ad.constant(f21.data), region, coords_flat
    )
    return float(node.value)


def _subsample(values: np.ndarray, cfg: EntropyConfig) -> np.ndarray:
    if values.size > cfg.sample_count:
        idx = np.random.default_rng(cfg.rng_seed).choice(
            values.size, cfg.sample_count, replace=False
        )
        return values[idx]
    return values


def entropy_estimate(samples, cfg: EntropyConfig, exact: bool = False) -> float:
    """Plug-in entropy of the sample multiset; ``exact`` uses the
    exact-match indicator kernel, otherwise exp(-lambda |x|)."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size < 2:
        raise InvalidArgumentError("entropy needs at least 2 samples")
    samples = _subsample(samples, cfg)
    n = samples.size
    if exact:
        k = (samples[:, None] == samples[None, :]).astype(np.float64)
    else:
        k = np.exp(-cfg.kernel_bandwidth * np.abs(samples[:, None] - samples[None, :]))
    return float(-np.mean(np.log(k.mean(axis=1))))


def mutual_information_loss(
    i1: Volume, i2: Volume, cfg: EntropyConfig, exact: bool = False
) -> float:
    """Loss = -(H(X) + H(Y) - H(X, Y)); one seeded location subsample is
    shared by all three entropy terms."""
    _require_same_grid(i1, i2)
    x = i1.data.ravel()
    y = i2.data.ravel()
    if x.size > cfg.sample_count:
        idx = np.random.default_rng(cfg.rng_seed).choice(x.size, cfg.sample_count, replace=False)
        x, y = x[idx], y[idx]
    n = x.size

    def ent(k):
        return float(-np.mean(np.log(k.mean(axis=1))))

    if exact:
        kx = (x[:, None] == x[None, :]).astype(np.float64)
        ky = (y[:, None] == y[None, :]).astype(np.float64)
    else:
        lam = cfg.kernel_bandwidth
        kx = np.exp(-lam * np.abs(x[:, None] - x[None, :]))
        ky = np.exp(-lam * np.abs(y[:, None] - y[None, :]))
    mi = ent(kx) + ent(ky) - ent(kx * ky)
    return -mi
