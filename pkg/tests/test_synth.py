"""Synthetic phantoms, random B-spline flows, and ground-truth pairs."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from flowreg import fields, metrics, synth
from flowreg.exceptions import InvalidArgumentError, ShapeError
from flowreg.grid import FlowField, GridSpec


# --------------------------------------------------------------------------
# B-spline basis and fields


@given(st.floats(0.0, 1.0))
@settings(max_examples=100, deadline=None)
def test_bspline_basis_partition_of_unity(t):
    w = synth._bspline_basis(np.array([t]))
    assert w.shape == (1, 4)
    assert (w >= 0).all()
    assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_bspline_constant_controls_give_constant_field():
    control = np.full((4, 4, 4, 3), 2.5)
    out = synth.bspline_interpolate(control, GridSpec((9, 9, 9)))
    np.testing.assert_allclose(out, 2.5, atol=1e-12)


def test_bspline_zero_max_displacement_gives_zero_flow():
    spec = synth.BSplineFieldSpec(max_displacement=0.0)
    f = synth.random_bspline_flow(spec, GridSpec((8, 8, 8)))
    np.testing.assert_array_equal(f.data, 0.0)


def test_bspline_flow_respects_displacement_bound():
    for seed in range(5):
        spec = synth.BSplineFieldSpec(max_displacement=12.0, rng_seed=seed)
        f = synth.random_bspline_flow(spec, GridSpec((32, 32, 32)))
        assert np.abs(f.data).max() <= 12.0 + 1e-9


def test_bspline_flow_deterministic_per_seed():
    spec = synth.BSplineFieldSpec(rng_seed=7)
    a = synth.random_bspline_flow(spec, GridSpec((16, 16, 16)))
    b = synth.random_bspline_flow(spec, GridSpec((16, 16, 16)))
    np.testing.assert_array_equal(a.data, b.data)


def test_bspline_flow_is_nontrivial():
    spec = synth.BSplineFieldSpec(rng_seed=1)
    f = synth.random_bspline_flow(spec, GridSpec((16, 16, 16)))
    assert np.abs(f.data).max() > 1.0


def test_bspline_spec_validation():
    with pytest.raises(InvalidArgumentError):
        synth.BSplineFieldSpec(control_points=(1, 5, 5))
    with pytest.raises(InvalidArgumentError):
        synth.BSplineFieldSpec(max_displacement=-1.0)


# --------------------------------------------------------------------------
# phantoms


def test_phantom_deterministic_per_seed():
    spec = synth.PhantomSpec(dims=(24, 24, 24), rng_seed=3)
    a = synth.make_phantom(spec)
    b = synth.make_phantom(spec)
    np.testing.assert_array_equal(a[0].data, b[0].data)
    np.testing.assert_array_equal(a[1].data, b[1].data)


def test_phantom_landmark_count_matches_blob_count():
    spec = synth.PhantomSpec(dims=(24, 24, 24), blob_count=4, rng_seed=5)
    _, _, landmarks = synth.make_phantom(spec)
    assert len(landmarks.points) == 4


def test_phantom_mask_covers_blob_centers():
    spec = synth.PhantomSpec(dims=(32, 32, 32), blob_count=3, rng_seed=6, texture_count=0)
    volume, mask, landmarks = synth.make_phantom(spec)
    assert mask.data.any() and not mask.data.all()
    for _, center in landmarks.points:
        idx = tuple(int(round(c)) for c in center)
        assert mask.data[idx]


def test_phantom_single_blob_mask_is_connected():
    spec = synth.PhantomSpec(dims=(32, 32, 32), blob_count=1, rng_seed=7, texture_count=0)
    _, mask, _ = synth.make_phantom(spec)
    _, n_components = ndimage.label(mask.data)
    assert n_components == 1


def test_phantom_texture_adds_fine_scale_detail():
    base = synth.PhantomSpec(dims=(32, 32, 32), rng_seed=8, texture_count=0)
    textured = synth.PhantomSpec(dims=(32, 32, 32), rng_seed=8, texture_count=200)
    flat = synth.make_phantom(base)[0].data
    rich = synth.make_phantom(textured)[0].data
    # texture should raise high-frequency energy (sum of squared differences)
    def hf_energy(v):
        return sum(float((np.diff(v, axis=a) ** 2).sum()) for a in range(3))

    assert hf_energy(rich) > 2 * hf_energy(flat)


def test_phantom_spec_validation():
    with pytest.raises(InvalidArgumentError):
        synth.PhantomSpec(blob_count=0)
    with pytest.raises(InvalidArgumentError):
        synth.PhantomSpec(texture_count=-1)


# --------------------------------------------------------------------------
# pairs


def make_small_pair(seed=0, max_disp=4.0):
    phantom = synth.make_phantom(synth.PhantomSpec(dims=(32, 32, 32), rng_seed=seed))
    flow = synth.random_bspline_flow(
        synth.BSplineFieldSpec(max_displacement=max_disp, rng_seed=seed + 1),
        phantom[0].grid,
    )
    return synth.make_pair(phantom, flow)


def test_pair_zero_flow_fixed_equals_moving():
    phantom = synth.make_phantom(synth.PhantomSpec(dims=(24, 24, 24), rng_seed=9))
    pair = synth.make_pair(phantom, FlowField.zeros(phantom[0].grid))
    np.testing.assert_array_equal(pair.fixed.data, pair.moving.data)
    np.testing.assert_array_equal(pair.fixed_mask.data, pair.moving_mask.data)
    for name, p in pair.fixed_landmarks.points:
        np.testing.assert_allclose(p, pair.moving_landmarks.position(name), atol=1e-9)


def test_pair_integer_translation_shifts_content():
    phantom = synth.make_phantom(
        synth.PhantomSpec(dims=(32, 32, 32), rng_seed=10, texture_count=50)
    )
    data = np.zeros((32, 32, 32, 3))
    data[..., 0] = 2.0
    flow = FlowField(phantom[0].grid, data)
    pair = synth.make_pair(phantom, flow)
    # fixed(x) = moving(x + 2 e_x) exactly on the interior
    np.testing.assert_allclose(
        pair.fixed.data[:-2], pair.moving.data[2:], atol=1e-12
    )
    # landmarks displace by the inverse map: fixed = moving - 2 e_x
    for name, p in pair.fixed_landmarks.points:
        expected = pair.moving_landmarks.position(name) - [2.0, 0.0, 0.0]
        np.testing.assert_allclose(p, expected, atol=1e-9)


def test_pair_warp_equation_holds():
    pair = make_small_pair(seed=11)
    rewarped = fields.warp_volume(pair.moving, pair.ground_truth_flow)
    np.testing.assert_array_equal(rewarped.data, pair.fixed.data)


def test_pair_landmarks_consistent_with_flow():
    pair = make_small_pair(seed=12)
    d = metrics.landmark_distance(
        pair.moving_landmarks, pair.fixed_landmarks, pair.ground_truth_flow
    )
    assert d < 0.1  # fixed-point inversion residual


def test_pair_masks_consistent_under_gt_flow():
    pair = make_small_pair(seed=13)
    warped = metrics.warp_mask(pair.moving_mask, pair.ground_truth_flow)
    assert metrics.seg_iou(warped, pair.fixed_mask) >= 0.95


def test_pair_grid_mismatch_rejected():
    phantom = synth.make_phantom(synth.PhantomSpec(dims=(24, 24, 24), rng_seed=14))
    with pytest.raises(ShapeError):
        synth.make_pair(phantom, FlowField.zeros(GridSpec((16, 16, 16))))
