"""Reverse-mode tape: primitive adjoints, gradient checking, failure modes."""

from collections import OrderedDict

import numpy as np
import pytest

import flowreg.autodiff as ad
from flowreg import interp
from flowreg.exceptions import ConfigurationError, NumericError


def params_of(**blocks) -> ad.ParameterSet:
    return ad.ParameterSet(OrderedDict(blocks))


# --------------------------------------------------------------------------
# basic primitives


def test_quadratic_gradient_exact():
    arr = np.array([1.0, -2.0, 3.0])
    p = ad.parameter(arr)
    root = (p * p).sum()
    g = ad.backward(root)[id(p)]
    np.testing.assert_allclose(g, 2 * arr, atol=1e-15)


def test_gradient_linearity():
    rng = np.random.default_rng(0)
    arr = rng.normal(size=(3, 3))

    def grad_of(builder):
        p = ad.parameter(arr)
        return ad.backward(builder(p))[id(p)]

    g1 = grad_of(lambda p: (p * p).sum())
    g2 = grad_of(lambda p: p.sum())
    g12 = grad_of(lambda p: (p * p).sum() * 2.0 + p.sum() * -3.0)
    np.testing.assert_allclose(g12, 2.0 * g1 - 3.0 * g2, atol=1e-13)


def test_broadcast_gradients_unbroadcast():
    a = ad.parameter(np.ones((4, 1)))
    b = ad.parameter(np.ones(3))
    root = (a * b).sum()
    grads = ad.backward(root)
    assert grads[id(a)].shape == (4, 1)
    assert grads[id(b)].shape == (3,)
    np.testing.assert_allclose(grads[id(a)], 3.0)
    np.testing.assert_allclose(grads[id(b)], 4.0)


def test_shared_subexpression_accumulates():
    arr = np.array([2.0])
    p = ad.parameter(arr)
    q = p * 3.0
    root = (q + q + q).sum()
    np.testing.assert_allclose(ad.backward(root)[id(p)], 9.0)


def test_getitem_adjoint_scatters():
    arr = np.arange(6.0)
    p = ad.parameter(arr)
    root = p[2] * 5.0 + p[4]
    g = ad.backward(root)[id(p)]
    np.testing.assert_array_equal(g, [0, 0, 5, 0, 1, 0])


def test_matmul_adjoint_matches_fd():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    pa = ad.parameter(a)
    root = (ad.matmul(pa, ad.constant(b)) ** 2).sum()
    g = ad.backward(root)[id(pa)]
    h = 1e-6
    for idx in [(0, 0), (2, 3)]:
        ap = a.copy()
        ap[idx] += h
        am = a.copy()
        am[idx] -= h
        fd = (((ap @ b) ** 2).sum() - ((am @ b) ** 2).sum()) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-6)


# --------------------------------------------------------------------------
# sampling adjoints


def dot_check(forward_out, grad_in, adjoint_out, primal_in):
    """Inner-product test <g, J p> == <J^T g, p> for a linear map."""
    return np.vdot(grad_in, forward_out), np.vdot(adjoint_out, primal_in)


def test_sample_source_adjoint_inner_product():
    rng = np.random.default_rng(2)
    src = rng.normal(size=(5, 5, 5))
    pts = rng.uniform(0.5, 3.5, size=(40, 3))
    values, plan = interp.sample_forward(src, pts)
    g = rng.normal(size=values.shape)
    gsrc = interp.sample_adjoint_source(plan, g)
    # sampling is linear in the source: <g, S src> must equal <S^T g, src>
    assert np.vdot(g, values) == pytest.approx(np.vdot(gsrc, src), rel=1e-12)


def test_sample_points_adjoint_matches_fd():
    rng = np.random.default_rng(3)
    src = rng.normal(size=(6, 6, 6))
    pts = rng.uniform(1.2, 4.3, size=(10, 3))
    p = ad.parameter(pts)
    root = (ad.sample(ad.constant(src), p) ** 2).sum()
    g = ad.backward(root)[id(p)]
    h = 1e-6

    def loss_at(q):
        vals, _ = interp.sample_forward(src, q)
        return float((vals**2).sum())

    for idx in [(0, 0), (4, 1), (9, 2)]:
        qp = pts.copy()
        qp[idx] += h
        qm = pts.copy()
        qm[idx] -= h
        fd = (loss_at(qp) - loss_at(qm)) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_sample_points_adjoint_zero_when_clamped():
    src = np.random.default_rng(4).normal(size=(4, 4, 4))
    pts = np.array([[-3.0, 1.5, 1.5], [1.5, 1.5, 9.0]])
    p = ad.parameter(pts)
    root = ad.sample(ad.constant(src), p).sum()
    g = ad.backward(root)[id(p)]
    assert g[0, 0] == 0.0  # clamped below on x
    assert g[1, 2] == 0.0  # clamped above on z


def test_fused_pair_adjoint_equals_separate_paths():
    rng = np.random.default_rng(5)
    src = rng.normal(size=(5, 5, 5, 3))
    pts = rng.uniform(0.3, 3.7, size=(30, 3))
    values, plan = interp.sample_forward(src, pts)
    g = rng.normal(size=values.shape)
    gsrc, gpts = interp.sample_adjoint_pair(plan, g)
    np.testing.assert_allclose(gsrc, interp.sample_adjoint_source(plan, g), atol=1e-14)
    np.testing.assert_allclose(gpts, interp.sample_adjoint_points(plan, g), atol=1e-14)


def test_resize_value_matches_pointwise_sampling():
    rng = np.random.default_rng(6)
    src = rng.normal(size=(4, 5, 6, 3))
    tgt = (8, 9, 11)
    out = interp.resize_field(src, tgt)
    # corner-aligned positions
    pos = [np.arange(t) * (s - 1) / (t - 1) for t, s in zip(tgt, src.shape[:3])]
    gx, gy, gz = np.meshgrid(*pos, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    vals, _ = interp.sample_forward(src, pts)
    np.testing.assert_allclose(out, vals.reshape(tgt + (3,)), atol=1e-12)


def test_resize_adjoint_inner_product():
    rng = np.random.default_rng(7)
    src = rng.normal(size=(4, 4, 4, 3))
    out = interp.resize_field(src, (8, 8, 8))
    g = rng.normal(size=out.shape)
    gsrc = interp.resize_field_adjoint(g, (4, 4, 4))
    assert np.vdot(g, out) == pytest.approx(np.vdot(gsrc, src), rel=1e-12)


# --------------------------------------------------------------------------
# evaluate_with_gradients / gradient_check


def test_evaluate_unused_block_gets_zero_gradient():
    params = params_of(a=np.array([1.0, 2.0]), b=np.array([3.0]))

    def pipeline(nodes):
        return (nodes["a"] * nodes["a"]).sum()

    loss, grads = ad.evaluate_with_gradients(pipeline, params)
    assert loss == pytest.approx(5.0)
    np.testing.assert_array_equal(grads["b"], [0.0])


def test_evaluate_rejects_unknown_parameter():
    params = params_of(a=np.array([1.0]))

    def pipeline(nodes):
        return nodes["missing"].sum()

    with pytest.raises(ConfigurationError):
        ad.evaluate_with_gradients(pipeline, params)


def test_evaluate_raises_on_nonfinite_loss():
    params = params_of(a=np.array([-1.0]))

    def pipeline(nodes):
        return ad.log(nodes["a"]).sum()

    with pytest.raises(NumericError):
        ad.evaluate_with_gradients(pipeline, params)


def test_deep_loss_reaches_early_parameters():
    # stage-2 only loss must still produce nonzero stage-1 gradients through
    # the recorded warp
    rng = np.random.default_rng(8)
    src = rng.uniform(size=(6, 6, 6))
    base_pts = np.stack(
        np.meshgrid(*[np.arange(6.0)] * 3, indexing="ij"), axis=-1
    ).reshape(-1, 3)
    params = params_of(
        stage1=np.zeros((6, 6, 6, 3)), stage2=rng.normal(scale=0.1, size=(6, 6, 6, 3))
    )

    def pipeline(nodes):
        pts1 = nodes["stage1"].reshape(-1, 3) + base_pts
        warped1 = ad.sample(ad.constant(src), pts1).reshape(6, 6, 6)
        pts2 = nodes["stage2"].reshape(-1, 3) + base_pts
        warped2 = ad.sample(warped1, pts2).reshape(6, 6, 6)
        return (warped2 * warped2).mean()

    _, grads = ad.evaluate_with_gradients(pipeline, params)
    assert np.abs(grads["stage1"]).max() > 0.0


def quadratic_pipeline(nodes):
    return (nodes["p"] * nodes["p"]).sum() * 0.5 + nodes["p"].sum() * 3.0


def test_gradient_check_quadratic_passes():
    params = params_of(p=np.random.default_rng(9).normal(size=(4, 4)))
    report = ad.gradient_check(quadratic_pipeline, params, n_coords=16, tolerance=1e-6)
    assert report.passed
    assert report.checked == 16
    assert report.max_rel_error < 1e-8


def test_gradient_check_negative_control_fails():
    rng = np.random.default_rng(10)
    src = rng.uniform(size=(6, 6, 6))
    base_pts = np.stack(
        np.meshgrid(*[np.arange(6.0)] * 3, indexing="ij"), axis=-1
    ).reshape(-1, 3)
    params = params_of(
        flow1=rng.normal(scale=0.2, size=(6, 6, 6, 3)),
        flow2=rng.normal(scale=0.2, size=(6, 6, 6, 3)),
    )

    def pipeline(nodes):
        # two chained warps: the corrupted source adjoint sits on the path
        # from the stage-2 loss back to the stage-1 flow
        pts1 = nodes["flow1"].reshape(-1, 3) + base_pts
        warped1 = ad.sample(ad.constant(src), pts1).reshape(6, 6, 6)
        pts2 = nodes["flow2"].reshape(-1, 3) + base_pts
        warped2 = ad.sample(warped1, pts2).reshape(6, 6, 6)
        return (warped2 * warped2).mean()

    clean = ad.gradient_check(pipeline, params, n_coords=60, seed=1)
    assert clean.passed
    ad.FAULT_INJECT = True
    try:
        corrupted = ad.gradient_check(pipeline, params, n_coords=60, seed=1)
    finally:
        ad.FAULT_INJECT = False
    assert not corrupted.passed


def test_gradient_check_rejects_bad_step():
    params = params_of(p=np.zeros(3))
    with pytest.raises(ConfigurationError):
        ad.gradient_check(quadratic_pipeline, params, step=0.0)


def test_gradient_check_csv_line_roundtrip():
    params = params_of(p=np.ones(3))
    report = ad.gradient_check(quadratic_pipeline, params, n_coords=3)
    fields = report.csv_line().split(",")
    assert len(fields) == 6
    assert float(fields[0]) == pytest.approx(report.max_rel_error, rel=1e-5)
    assert int(fields[5]) == 1


def test_parameter_set_copy_is_deep():
    params = params_of(p=np.zeros(3))
    clone = params.copy()
    clone.blocks["p"][0] = 5.0
    assert params["p"][0] == 0.0
