"""Bias constructors: causal mask, span ramp, Gaussian kernel, combination."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prior_attn import autodiff as ad
from prior_attn import biases
from prior_attn.autodiff import Tensor
from prior_attn.errors import ContractError, DimensionError


def test_causal_bias_definition():
    np.testing.assert_array_equal(biases.causal_bias(1).data, [[0.0]])
    np.testing.assert_array_equal(
        biases.causal_bias(2).data, [[0.0, -np.inf], [0.0, 0.0]]
    )
    assert biases.causal_bias(3).data[0, 2] == -np.inf
    with pytest.raises(DimensionError):
        biases.causal_bias(0)


def test_adaptive_mask_hard_limit_matches_window_rule():
    # ramp -> 0: attend iff i - j <= span
    m = biases.adaptive_soft_mask(2.0, 1e-9, 8).data
    i = 7
    assert m[i, i - 2] == 1.0  # d = 2 allowed
    assert m[i, i - 3] == 0.0  # d = 3 blocked


def test_adaptive_mask_ramp_value():
    m = biases.adaptive_soft_mask(6.0, 3.0, 10).data
    i = 9
    assert m[i, i - 7] == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_adaptive_mask_self_position_always_allowed():
    for span in (0.0, 0.5, 3.0):
        m = biases.adaptive_soft_mask(span, 3.0, 5).data
        np.testing.assert_array_equal(np.diag(m), np.ones(5))


def test_adaptive_mask_rejects_bad_ramp():
    with pytest.raises(ContractError):
        biases.adaptive_soft_mask(2.0, 0.0, 4)


def test_gaussian_bias_values():
    g = biases.gaussian_bias(6.0, 1.0, 10).data
    i = 9
    assert g[i, i - 6] == 0.0  # kernel max at the mean offset
    assert g[i, i - 7] == pytest.approx(-0.5, abs=1e-12)
    assert g[i, i] == pytest.approx(-18.0, abs=1e-12)
    assert g[0, 5] == -np.inf  # future masked


def test_gaussian_bias_rejects_nonpositive_sigma():
    with pytest.raises(ContractError):
        biases.gaussian_bias(6.0, 0.0, 4)


def test_gaussian_bias_per_head_vector():
    mu = Tensor(np.array([2.0, 6.0]))
    sigma = Tensor(np.array([1.0, 2.0]))
    g = biases.gaussian_bias(mu, sigma, 8)
    assert g.shape == (2, 8, 8)
    assert g.data[0, 7, 5] == 0.0  # head 0 peak at d=2
    assert g.data[1, 7, 1] == 0.0  # head 1 peak at d=6


def test_combined_bias_neutral_mask_keeps_gaussian():
    g = biases.gaussian_bias(3.0, 1.0, 6)
    ones = Tensor(np.where(biases.future_mask(6), 0.0, 1.0))
    combined = biases.combined_bias(g, ones).data
    past = ~biases.future_mask(6)
    np.testing.assert_array_equal(combined[past], g.data[past])


def test_combined_bias_hard_window_reduces_to_causal_window():
    zeros = Tensor(np.where(biases.future_mask(6), -np.inf, 0.0))
    m = biases.adaptive_soft_mask(2.0, 1e-9, 6)
    combined = biases.combined_bias(zeros, m).data
    offs = biases.relative_offsets(6)
    past = ~biases.future_mask(6)
    assert (combined[past & (offs <= 2)] == 0.0).all()
    assert (combined[past & (offs > 2)] == -np.inf).all()


def test_combined_bias_truncates_gaussian_peak():
    # span 2 with a hard ramp removes the Gaussian maximum at d = 6
    g = biases.gaussian_bias(6.0, 1.0, 10)
    m = biases.adaptive_soft_mask(2.0, 1e-9, 10)
    combined = biases.combined_bias(g, m).data
    assert combined[9, 3] == -np.inf  # d = 6, at the kernel peak
    assert np.isfinite(combined[9, 8])  # d = 1 inside the window


def test_combined_bias_shape_mismatch():
    with pytest.raises(DimensionError):
        biases.combined_bias(biases.gaussian_bias(1.0, 1.0, 4), biases.causal_bias(5))


@settings(max_examples=50, deadline=None)
@given(
    span=st.floats(0.05, 19.0),
    ramp=st.floats(0.1, 5.0),
    T=st.integers(1, 12),
)
def test_adaptive_mask_bounds_and_causality(span, ramp, T):
    m = biases.adaptive_soft_mask(span, ramp, T).data
    assert (m >= 0.0).all() and (m <= 1.0).all()
    assert (m[biases.future_mask(T)] == 0.0).all()


@settings(max_examples=50, deadline=None)
@given(
    mu=st.floats(-5.0, 15.0),
    sigma=st.floats(0.05, 10.0),
    T=st.integers(1, 12),
)
def test_gaussian_bias_causal_and_nonpositive(mu, sigma, T):
    g = biases.gaussian_bias(mu, sigma, T).data
    fut = biases.future_mask(T)
    assert (g[fut] == -np.inf).all()
    assert (g[~fut] <= 0.0).all()


@settings(max_examples=30, deadline=None)
@given(
    lo=st.floats(0.5, 8.0),
    delta=st.floats(0.1, 8.0),
    ramp=st.floats(0.5, 4.0),
)
def test_mask_monotone_in_span(lo, delta, ramp):
    # growing the span never decreases any multiplier
    m_small = biases.adaptive_soft_mask(lo, ramp, 12).data
    m_large = biases.adaptive_soft_mask(lo + delta, ramp, 12).data
    assert (m_large >= m_small - 1e-15).all()


def test_bias_gradients():
    mu = ad.parameter(np.array([3.3]))
    sigma = ad.parameter(np.array([1.7]))
    span = ad.parameter(np.array([2.6]))

    def f_mu(t):
        w = ad.softmax_lastdim(Tensor(np.zeros((1, 6, 6))), biases.gaussian_bias(t, sigma, 6))
        return ad.reduce_sum(ad.square(w))

    def f_sigma(t):
        w = ad.softmax_lastdim(Tensor(np.zeros((1, 6, 6))), biases.gaussian_bias(mu, t, 6))
        return ad.reduce_sum(ad.square(w))

    def f_span(t):
        m = biases.adaptive_soft_mask(t, 3.0, 6)
        return ad.reduce_sum(ad.square(m))

    assert ad.grad_check(f_mu, mu, eps=1e-5) < 1e-6
    assert ad.grad_check(f_sigma, sigma, eps=1e-5) < 1e-6
    assert ad.grad_check(f_span, span, eps=1e-5) < 1e-6
