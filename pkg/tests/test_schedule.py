import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from margindiff.errors import ArgumentError, ConfigError
from margindiff.schedule import build_linear_schedule, forward_sample

# Product of the 1000 factors (1 - beta_i), evaluated by a plain Python loop.
ALPHA_BAR_1000 = 4.0358297653756754e-05


def product_oracle(T, beta_start, beta_end):
    p = 1.0
    for i in range(T):
        p *= 1.0 - (beta_start + (beta_end - beta_start) * i / (T - 1))
    return p


def test_first_alpha_bar_is_first_alpha():
    s = build_linear_schedule(1000, 1e-4, 0.02)
    assert s.alpha_bar[0] == s.alpha[0] == 0.9999


def test_last_alpha_bar_matches_product():
    s = build_linear_schedule(1000, 1e-4, 0.02)
    assert product_oracle(1000, 1e-4, 0.02) == pytest.approx(ALPHA_BAR_1000, rel=1e-15)
    assert s.alpha_bar[-1] == pytest.approx(ALPHA_BAR_1000, rel=1e-12)


def test_degenerate_single_step():
    s = build_linear_schedule(1, 0.5, 0.5)
    np.testing.assert_array_equal(s.beta, [0.5])
    np.testing.assert_array_equal(s.alpha_bar, [0.5])


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0), (2.5, 1e-4, 0.02)])
def test_rejects_bad_config(args):
    with pytest.raises(ConfigError):
        build_linear_schedule(*args)


@settings(max_examples=50, deadline=None)
@given(T=st.integers(1, 2000), lo=st.floats(1e-6, 0.05), span=st.floats(0, 0.05))
def test_schedule_invariants(T, lo, span):
    s = build_linear_schedule(T, lo, lo + span)
    assert np.all((s.beta > 0) & (s.beta < 1))
    np.testing.assert_array_equal(s.alpha, 1.0 - s.beta)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar < 1))
    np.testing.assert_allclose(s.sqrt_alpha_bar ** 2 + s.sqrt_one_minus_alpha_bar ** 2, 1.0, atol=1e-12, rtol=0)


def test_forward_sample_closed_form_cases():
    s = build_linear_schedule(100, 1e-4, 0.02)
    x0 = np.random.default_rng(0).uniform(-1, 1, (4, 4, 1))
    eps = np.random.default_rng(1).standard_normal(x0.shape)
    t = 37
    np.testing.assert_array_equal(forward_sample(x0, t, np.zeros_like(x0), s), s.sqrt_alpha_bar[t - 1] * x0)
    np.testing.assert_array_equal(forward_sample(np.zeros_like(x0), t, eps, s),
                                  s.sqrt_one_minus_alpha_bar[t - 1] * eps)
    a = forward_sample(x0, t, eps, s)
    np.testing.assert_array_equal(a, forward_sample(x0, t, eps, s))


def test_forward_sample_scalar_example():
    # abar = 0.64 for a single step with beta = 0.36.
    s = build_linear_schedule(1, 0.36, 0.36)
    out = forward_sample(np.array([1.0]), 1, np.array([0.5]), s)
    assert out[0] == pytest.approx(0.8 + 0.6 * 0.5, abs=1e-15)


def test_forward_sample_batched_timesteps():
    s = build_linear_schedule(50, 1e-4, 0.02)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (3, 2, 2, 1))
    eps = rng.standard_normal(x0.shape)
    ts = np.array([1, 20, 50])
    out = forward_sample(x0, ts, eps, s)
    for i, t in enumerate(ts):
        np.testing.assert_allclose(out[i], forward_sample(x0[i], int(t), eps[i], s), rtol=0, atol=1e-15)


def test_forward_sample_errors():
    s = build_linear_schedule(10, 1e-4, 0.02)
    with pytest.raises(ArgumentError):
        forward_sample(np.zeros(3), 1, np.zeros(4), s)
    for t in (0, 11):
        with pytest.raises(ArgumentError):
            forward_sample(np.zeros(3), t, np.zeros(3), s)


@pytest.mark.parametrize("t", [10, 500, 1000])
def test_forward_statistics(t):
    s = build_linear_schedule(1000, 1e-4, 0.02)
    n = 10_000
    x0 = np.array([0.7, -0.3, 0.0])
    eps = np.random.default_rng(t).standard_normal((n, 3))
    xt = forward_sample(np.broadcast_to(x0, eps.shape), np.full(n, t), eps, s)
    var = 1 - s.alpha_bar[t - 1]
    se_mean = math.sqrt(var / n)
    assert np.all(np.abs(xt.mean(axis=0) - s.sqrt_alpha_bar[t - 1] * x0) < 5 * se_mean)
    # Standard error of the sample variance of a Gaussian: var * sqrt(2 / (n - 1)).
    assert np.all(np.abs(xt.var(axis=0, ddof=1) - var) < 5 * var * math.sqrt(2 / (n - 1)))
