import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nfresnet import ops
from nfresnet import scaled_ws as ws


def test_standardized_rows_have_zero_mean_and_unit_norm():
    w = np.random.default_rng(0).normal(0.3, 2.0, (5, 3, 3, 4))
    out = ws.standardize_weight(w, eps=0.0)
    rows = out.reshape(5, -1)
    np.testing.assert_allclose(rows.mean(axis=1), 0, atol=1e-12)
    # population variance times fan-in equals one
    np.testing.assert_allclose(rows.var(axis=1) * rows.shape[1], 1.0, rtol=1e-12)


def test_gain_scales_rows_and_eps_shrinks():
    w = np.random.default_rng(1).standard_normal((3, 8))
    gain = np.array([1.0, 2.0, 0.5])
    out = ws.standardize_weight(w, gain, eps=0.0)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), gain, rtol=1e-12)
    assert np.all(np.linalg.norm(ws.standardize_weight(w, eps=1.0), axis=1) < 1)


def test_zero_variance_rows_map_to_zero_and_small_fan_in_rejected():
    w = np.ones((2, 4))
    for eps in (0.0, 1e-4):
        out = ws.standardize_weight(w, eps=eps)
        assert np.isfinite(out).all() and not out.any()
    with pytest.raises(ValueError):
        ws.standardize_weight(np.ones((3, 1)))


def test_vjp_for_two_element_row_is_orthogonal_to_ones_and_row():
    w = np.array([[1.0, -1.0]])
    g = np.array([[0.7, 0.2]])
    dw, _ = ws.standardize_weight_vjp(g, w, np.ones(1), eps=0.0)
    assert abs(dw.sum()) < 1e-12
    assert abs(np.dot(dw[0], w[0])) < 1e-12


def test_vjp_differs_from_naive_shortcut():
    """Treating mean and variance as constants gives a measurably wrong gradient."""
    rng = np.random.default_rng(2)
    w = rng.standard_normal((4, 9))
    g = rng.standard_normal((4, 9))
    dw, _ = ws.standardize_weight_vjp(g, w, None, eps=1e-4)
    rows = w - w.mean(axis=1, keepdims=True)
    naive = g / np.sqrt(rows.var(axis=1, keepdims=True) * 9 + 1e-4)
    assert np.abs(dw - naive).max() > 0.1 * np.abs(naive).max()


def test_vjp_matches_finite_differences():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((3, 2, 2, 3))
    gain = rng.uniform(0.5, 1.5, 3)
    r = rng.standard_normal(w.shape)
    dw, dgain = ws.standardize_weight_vjp(r, w, gain)

    def f(wv, gv):
        return np.sum(ws.standardize_weight(wv, gv) * r)
    h = 1e-6
    for idx in [(0, 0, 0, 0), (2, 1, 1, 2), (1, 0, 1, 1)]:
        e = np.zeros_like(w)
        e[idx] = h
        num = (f(w + e, gain) - f(w - e, gain)) / (2 * h)
        assert dw[idx] == pytest.approx(num, rel=1e-6, abs=1e-9)
    e = np.array([0.0, h, 0.0])
    assert dgain[1] == pytest.approx((f(w, gain + e) - f(w, gain - e)) / (2 * h), rel=1e-6)


def test_fixed_w_moments_against_loops():
    W = np.array([[1.0, 2.0, -1.0], [0.5, 0.5, 0.5]])
    pred = ws.fixed_w_moments(W, 0.4, 0.6)
    for i, row in enumerate(W):
        mean = sum(row) * 0.4
        var = sum(v * v for v in row) * 0.36
        assert pred.mean[i] == pytest.approx(mean)
        assert pred.var[i] == pytest.approx(var)


def test_activation_moments_relu_closed_form_and_silu_quadrature():
    mu, sd = ws.activation_moments("relu")
    assert mu == pytest.approx(1 / np.sqrt(2 * np.pi))
    assert sd == pytest.approx(np.sqrt((1 - 1 / np.pi) / 2))
    x = np.random.default_rng(4).standard_normal(4_000_000)
    silu = x / (1 + np.exp(-x))
    mu, sd = ws.activation_moments("silu")
    assert mu == pytest.approx(silu.mean(), abs=2e-3)
    assert sd == pytest.approx(silu.std(), rel=2e-3)


def test_gamma_values():
    assert ws.analytic_gamma("relu") == pytest.approx(np.sqrt(2) / np.sqrt(1 - 1 / np.pi))
    assert ws.analytic_gamma("identity") == 1.0
    with pytest.raises(ValueError):
        ws.analytic_gamma("silu")
    assert ws.estimate_activation_std("silu", rng=0) == pytest.approx(0.5595, rel=0.01)


def test_frozen_tanh_sigma_reproduces():
    assert ops.sigma_g("tanh") == ws.estimate_activation_std("tanh", 256, 1024, rng=0)


def test_gain_registry_round_trip(tmp_path):
    table = ws.gain_registry()
    assert table["relu"]["method"] == "analytic"
    path = tmp_path / "gains.json"
    ws.dump_gain_registry(table, path)
    assert json.loads(path.read_text())["silu"]["sigma_g"] == 0.5595
    assert ws.load_gain_registry(path)["tanh"] == ops.sigma_g("tanh")
    fresh = ws.gain_registry(seed=3, n_vectors=64, dim=32)
    assert fresh["relu"]["seed"] == 3


def test_check_moments_z_scores_are_small_for_correct_prediction():
    W = np.random.default_rng(5).normal(0.2, 1.0, (4, 8))
    check = ws.check_moments(W, "relu", 50_000, rng=1)
    assert check.max_z < 4.5
    # a 10% error in the predicted mean is many standard errors away
    se = np.sqrt(check.predicted.var / 50_000)
    assert np.abs((check.mc_mean - 1.1 * check.predicted.mean) / se).max() > 5


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), scale=st.floats(0.01, 100), shift=st.floats(-10, 10))
def test_standardization_is_invariant_to_affine_row_rescaling(seed, scale, shift):
    w = np.random.default_rng(seed).standard_normal((3, 12))
    a = ws.standardize_weight(w, eps=0.0)
    b = ws.standardize_weight(scale * w + shift, eps=0.0)
    np.testing.assert_allclose(a, b, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16), n=st.integers(2, 20))
def test_scaled_ws_conv_preserves_variance_in_expectation_shape(seed, n):
    """Standardized rows have unit squared norm, so Var(W x) = 1 for iid unit inputs."""
    w = ws.standardize_weight(np.random.default_rng(seed).standard_normal((5, n)), eps=0.0)
    np.testing.assert_allclose(np.sum(w * w, axis=1), 1.0, rtol=1e-9)


def test_non_finite_weights_are_not_masked():
    w = np.random.default_rng(6).standard_normal((2, 4))
    w[1, 0] = np.inf
    with np.errstate(invalid="ignore"):
        out = ws.standardize_weight(w)
    assert np.isfinite(out[0]).all() and not np.isfinite(out[1]).all()
