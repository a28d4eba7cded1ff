import math

import numpy as np
import pytest
from scipy.special import expit

from rtpref.core.ez_model import (
    EZParams, EZSampleConfig, choice_mean, choice_prob, expected_time, property_report,
    reward_identity, sample_trial, sample_trials, tanhc, time_variance,
)
from rtpref.errors import ConfigError, DomainError

A1 = EZParams(barrier_a=1.0)


def test_choice_prob_values():
    assert choice_prob(0.0, A1) == 0.5
    assert choice_prob(1.0, A1) == pytest.approx(0.880797, abs=1e-6)
    # 只依赖 a·r
    assert choice_prob(0.5, EZParams(barrier_a=2.0)) == pytest.approx(choice_prob(1.0, A1), abs=1e-15)


def test_expected_time_values():
    assert expected_time(0.0, A1) == 1.0
    assert expected_time(1.0, A1) == pytest.approx(0.761594, abs=1e-6)
    assert expected_time(0.0, EZParams(barrier_a=0.5)) == pytest.approx(0.25)


def test_time_variance_values():
    assert time_variance(0.0, A1) == pytest.approx(2.0 / 3.0)
    assert time_variance(0.0, EZParams(barrier_a=2.0)) == pytest.approx(32.0 / 3.0)
    e2, e4 = math.exp(2.0), math.exp(4.0)
    closed = (e4 - 1.0 - 4.0 * e2) / (e2 + 1.0) ** 2
    assert time_variance(1.0, A1) == pytest.approx(closed, rel=1e-12)


@pytest.mark.parametrize("a,r", [(0.5, 0.3), (2.0, -1.7), (1.3, 4.0)])
def test_time_variance_general_barrier(a, r):
    u = a * r
    closed = a * (math.exp(4 * u) - 1 - 4 * u * math.exp(2 * u)) / (r ** 3 * (math.exp(2 * u) + 1) ** 2)
    assert time_variance(r, EZParams(barrier_a=a)) == pytest.approx(closed, rel=1e-10)


def test_choice_mean_is_odd():
    assert choice_mean(0.0, A1) == 0.0
    assert choice_mean(1.0, A1) == pytest.approx(0.761594, abs=1e-6)
    assert choice_mean(-1.0, A1) == -choice_mean(1.0, A1)


def test_reward_identity():
    assert reward_identity(0.0, 1.0, A1) == 0.0
    assert reward_identity(math.tanh(1.0), math.tanh(1.0), A1) == pytest.approx(1.0)
    a2 = EZParams(barrier_a=2.0)
    assert reward_identity(math.tanh(1.0), 2 * math.tanh(1.0) / 0.5, a2) == pytest.approx(0.5)


def test_reward_identity_recovers_drift():
    r = np.linspace(-3, 3, 61)
    for a in (0.5, 1.0, 2.0):
        p = EZParams(barrier_a=a)
        np.testing.assert_allclose(reward_identity(choice_mean(r, p), expected_time(r, p), p), r, atol=1e-12)


def test_scalar_and_array_outputs():
    assert isinstance(expected_time(0.3, A1), float)
    out = expected_time(np.array([0.0, 0.3]), A1)
    assert isinstance(out, np.ndarray) and out.shape == (2,)


def test_tanhc_near_zero_is_smooth():
    u = np.array([-1e-3, -1e-5, 0.0, 1e-5, 1e-3])
    np.testing.assert_allclose(tanhc(u), np.where(u == 0, 1.0, np.tanh(u) / np.where(u == 0, 1, u)), rtol=1e-14)


@pytest.mark.parametrize("fn", [expected_time, time_variance, choice_mean, choice_prob])
def test_non_finite_input_rejected(fn):
    with pytest.raises(DomainError):
        fn(float("nan"), A1)
    with pytest.raises(ValueError):
        fn(np.array([0.0, np.inf]), A1)


def test_reward_identity_rejects_nonpositive_time():
    with pytest.raises(DomainError):
        reward_identity(0.1, 0.0, A1)


def test_params_validation():
    with pytest.raises(ConfigError):
        EZParams(barrier_a=0.0)
    with pytest.raises(ConfigError):
        EZParams(barrier_a=1.0, t_nd=-0.1)


def test_sample_config_validation():
    with pytest.raises(ConfigError):
        EZSampleConfig(dt=0.1).resolve(A1)
    with pytest.raises(ConfigError):
        EZSampleConfig(dt=1e-3, max_steps=100).resolve(A1)
    dt, steps = EZSampleConfig().resolve(EZParams(barrier_a=2.0))
    assert dt == pytest.approx(4.0 / 2500)
    assert steps * dt >= 50 * 4.0


@pytest.mark.parametrize("check", sorted(property_report()))
def test_property_report(check):
    assert property_report()[check]


def test_sigmoid_tanh_inequality_has_no_barrier_factor():
    x = np.array([-3.0, -0.5, 0.2, 2.0])
    lhs = 4 * expit(2 * x) * expit(-2 * x)
    assert np.all(lhs < np.asarray(tanhc(x)) ** 2)


def test_sample_trial_types():
    y, t = sample_trial(0.4, A1, EZSampleConfig(), np.random.default_rng(0))
    assert y in (-1, 1)
    assert isinstance(t, float) and t > 0


def test_sampler_seeded_reproducible():
    r = np.full(200, 0.3)
    y1, t1 = sample_trials(r, A1, EZSampleConfig(), np.random.default_rng(5))
    y2, t2 = sample_trials(r, A1, EZSampleConfig(), np.random.default_rng(5))
    np.testing.assert_array_equal(y1, y2)
    np.testing.assert_array_equal(t1, t2)


def test_sampler_zero_drift_is_balanced():
    y, _ = sample_trials(np.zeros(20_000), A1, EZSampleConfig(), np.random.default_rng(1))
    assert abs(y.mean()) < 0.03


def test_sampler_mean_time_and_non_decision_offset():
    rng = np.random.default_rng(2)
    _, t = sample_trials(np.full(20_000, 0.7), A1, EZSampleConfig(), rng)
    assert t.mean() == pytest.approx(math.tanh(0.7) / 0.7, abs=0.03)
    _, t = sample_trials(np.full(20_000, 0.7), EZParams(1.0, t_nd=0.3), EZSampleConfig(), rng)
    assert t.min() > 0.3
    assert t.mean() == pytest.approx(math.tanh(0.7) / 0.7 + 0.3, abs=0.03)


@pytest.mark.slow
@pytest.mark.parametrize("a", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("r", [0.0, 0.3, 1.0, 3.0])
def test_sampler_matches_closed_form_moments(r, a):
    n = 200_000
    p = EZParams(barrier_a=a)
    y, t = sample_trials(np.full(n, r), p, EZSampleConfig(), np.random.default_rng(int(100 * r + 10 * a)))
    se_y = y.std(ddof=1) / math.sqrt(n)
    se_t = t.std(ddof=1) / math.sqrt(n)
    centered = (t - t.mean()) ** 2
    se_v = centered.std(ddof=1) / math.sqrt(n)
    assert abs(y.mean() - choice_mean(r, p)) <= 3 * se_y + 1e-12
    assert abs(t.mean() - expected_time(r, p)) <= 3 * se_t
    assert abs(t.mean() - expected_time(r, p)) <= 0.01 * a * a
    assert abs(t.var(ddof=1) - time_variance(r, p)) <= 4 * se_v


@pytest.mark.slow
def test_sampler_variance_at_unit_drift():
    n = 1_000_000
    _, t = sample_trials(np.ones(n), A1, EZSampleConfig(), np.random.default_rng(11))
    se_v = ((t - t.mean()) ** 2).std(ddof=1) / math.sqrt(n)
    assert abs(t.var(ddof=1) - time_variance(1.0, A1)) <= 4 * se_v
