"""Shared helpers for the test suite."""

import numpy as np
import pytest

from flowreg.grid import FlowField, GridSpec, Volume


def random_volume(dims, seed, lo=0.0, hi=1.0) -> Volume:
    rng = np.random.default_rng(seed)
    return Volume(GridSpec(dims), rng.uniform(lo, hi, size=tuple(dims)))


def random_flow(dims, seed, scale=1.0) -> FlowField:
    rng = np.random.default_rng(seed)
    return FlowField(GridSpec(dims), rng.uniform(-scale, scale, size=tuple(dims) + (3,)))


def smooth_random_flow(dims, seed, max_disp=1.0) -> FlowField:
    """Band-limited random flow: low-frequency cosine modes per component."""
    rng = np.random.default_rng(seed)
    grid = GridSpec(dims)
    coords = grid.coords()
    data = np.zeros(tuple(dims) + (3,))
    for c in range(3):
        for _ in range(4):
            k = rng.uniform(0.5, 1.5, size=3) / np.asarray(dims)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.1, 0.5)
            data[..., c] += amp * np.cos(2 * np.pi * (coords * k).sum(-1) + phase)
        m = np.abs(data[..., c]).max()
        if m > 0:
            data[..., c] *= rng.uniform(0.5, 1.0) * max_disp / m
    return FlowField(grid, data)


def constant_flow(dims, t) -> FlowField:
    data = np.broadcast_to(np.asarray(t, dtype=np.float64), tuple(dims) + (3,)).copy()
    return FlowField(GridSpec(dims), data)


def x_ramp_volume(dims) -> Volume:
    grid = GridSpec(dims)
    return Volume(grid, grid.coords()[..., 0])


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)
