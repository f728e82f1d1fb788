import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trail._validation import ConfigurationError
from trail.schedule import NoiseSchedule, build_linear_schedule, sigma_sq


def test_two_step_example():
    s = NoiseSchedule.from_betas([0.1, 0.3])
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.63], rtol=0, atol=1e-15)
    assert sigma_sq(s, 1) == pytest.approx(0.1, abs=1e-15)
    assert sigma_sq(s, 2) == pytest.approx(0.37, abs=1e-15)


def test_linear_endpoints():
    s = build_linear_schedule(80)
    assert s.T == 80
    assert s.beta(1) == pytest.approx(1e-4)
    assert s.beta(80) == pytest.approx(0.02)
    assert s.betas.dtype == np.float64


def test_alpha_bar_zero_is_one():
    assert build_linear_schedule(10).alpha_bar(0) == 1.0


def test_posterior_variance_zero_at_first_step():
    s = build_linear_schedule(10)
    assert s.posterior_variance(1) == 0.0
    assert s.posterior_variance(5) == s.beta(5)


def test_arrays_are_read_only():
    s = build_linear_schedule(5)
    with pytest.raises(ValueError):
        s.betas[0] = 0.5


@pytest.mark.parametrize("betas", [[0.0, 0.1], [0.1, 1.0], [-0.1], []])
def test_invalid_betas_rejected(betas):
    with pytest.raises(ConfigurationError):
        NoiseSchedule.from_betas(betas)


@pytest.mark.parametrize("args", [(0,), (2.5,), (10, 0.03, 0.02), (10, 0.0, 0.02), (10, 1e-4, 1.0)])
def test_invalid_linear_arguments(args):
    with pytest.raises(ConfigurationError):
        build_linear_schedule(*args)


@pytest.mark.parametrize("t", [0, 81])
def test_sigma_sq_out_of_range(t):
    with pytest.raises(IndexError):
        sigma_sq(build_linear_schedule(80), t)


betas_strategy = st.lists(st.floats(1e-6, 0.5), min_size=1, max_size=200)
# small enough that 1 - alpha_bar stays representably below 1
diffusion_betas = st.lists(st.floats(1e-6, 0.05), min_size=1, max_size=200)


@settings(max_examples=100, deadline=None)
@given(betas_strategy)
def test_alpha_bar_matches_log_space_product(betas):
    s = NoiseSchedule.from_betas(betas)
    oracle = np.exp(np.cumsum(np.log1p(-np.asarray(betas))))
    np.testing.assert_allclose(s.alpha_bars, oracle, rtol=1e-12, atol=0)


@settings(max_examples=100, deadline=None)
@given(diffusion_betas)
def test_sigma_sq_strictly_increasing(betas):
    s = NoiseSchedule.from_betas(betas)
    values = [sigma_sq(s, t) for t in range(1, s.T + 1)]
    assert all(b > a for a, b in zip(values, values[1:]))
    assert all(0 < v < 1 for v in values)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.floats(1e-5, 0.05), st.floats(0.0, 0.2))
def test_linear_schedule_alpha_identity(T, lo, gap):
    hi = min(lo + gap, 0.99)
    s = build_linear_schedule(T, lo, hi)
    t = (T + 1) // 2
    assert s.alpha_bar(t) == pytest.approx(math.prod(s.alpha(k) for k in range(1, t + 1)), rel=1e-12)
