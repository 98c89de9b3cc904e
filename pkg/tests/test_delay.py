import math

import numpy as np
import pytest
from scipy import integrate, stats

from cavdetect.delay import (
    DelayConfig,
    DelaySampler,
    LookupUnderflowError,
    TimedTrace,
    lookup_delayed,
    perturbation_of_delay,
    sample_delay,
    truncated_delay_mean,
    warmup_steps,
)


def ramp_trace():
    # values 10 * t on t = 0, 0.1, ..., 1.0
    return TimedTrace.from_array(0.0, 0.1, 10.0 * np.arange(11) * 0.1)


def test_lookup_on_sample_points_is_exact():
    tr = ramp_trace()
    assert tr.at(0.3)[0] == pytest.approx(3.0, abs=1e-12)
    assert tr.at(1.0)[0] == pytest.approx(10.0, abs=1e-12)


def test_lookup_interpolates_linearly_between_samples():
    tr = ramp_trace()
    assert tr.at(0.25)[0] == pytest.approx(2.5, abs=1e-12)
    assert lookup_delayed(tr, 0.9, 0.35)[0] == pytest.approx(5.5, abs=1e-12)


def test_lookup_before_start_underflows():
    tr = ramp_trace()
    with pytest.raises(LookupUnderflowError) as info:
        lookup_delayed(tr, 0.2, 0.5)
    assert info.value.query == pytest.approx(-0.3)
    assert tr.at(-0.3, hold_first=True)[0] == 0.0


def test_lookup_past_end_raises_unless_held():
    tr = ramp_trace()
    with pytest.raises(LookupError):
        tr.at(1.05)
    assert tr.at(1.05, hold_last=True)[0] == pytest.approx(10.0)


def test_append_grows_storage_and_keeps_values():
    tr = TimedTrace(0.0, 0.5, 2, capacity=2)
    for i in range(10):
        tr.append([i, -i])
    assert len(tr) == 10
    assert tr.t_end == pytest.approx(4.5)
    np.testing.assert_array_equal(tr.values[:, 0], np.arange(10))
    tr.set_last([99, 98])
    np.testing.assert_array_equal(tr.values[-1], [99, 98])


def test_fixed_delay_sampling_is_exact():
    cfg = DelayConfig(0.5)
    assert sample_delay(cfg, np.random.default_rng(0)) == 0.5
    sampler = DelaySampler(cfg)
    assert [sampler.sample() for _ in range(3)] == [0.5, 0.5, 0.5]
    assert sampler.draws == 0


def test_sampler_counts_clamped_draws():
    cfg = DelayConfig(0.0, stochastic=True, kappa_std=1.0, seed=5)
    sampler = DelaySampler(cfg)
    draws = np.array([sampler.sample() for _ in range(20000)])
    assert draws.min() == 0.0
    assert sampler.clamped == int((draws == 0.0).sum())
    # half of N(0, 1) draws are negative
    assert abs(sampler.clamped / 20000 - 0.5) < 4 * math.sqrt(0.25 / 20000)


@pytest.mark.parametrize("tau, std", [(0.0, 1.0), (0.5, 0.3), (1.5, 1.0), (0.2, 2.0), (1.0, 0.0)])
def test_truncated_mean_matches_quadrature(tau, std):
    if std == 0:
        assert truncated_delay_mean(tau, std) == tau
        return
    integrand = lambda k: max(0.0, tau + k) * stats.norm.pdf(k, scale=std)
    expected, _ = integrate.quad(integrand, -tau, np.inf)
    assert truncated_delay_mean(tau, std) == pytest.approx(expected, abs=1e-9)


def test_truncated_mean_matches_sampler_average():
    cfg = DelayConfig(0.5, stochastic=True, kappa_std=0.5, seed=11)
    sampler = DelaySampler(cfg)
    draws = np.array([sampler.sample() for _ in range(40000)])
    se = draws.std() / math.sqrt(len(draws))
    assert abs(draws.mean() - truncated_delay_mean(0.5, 0.5)) < 4 * se


def test_perturbation_of_constant_speed_leader_is_linear_in_delay_error():
    t = np.arange(0, 20.0001, 0.1)
    tr = TimedTrace.from_array(0.0, 0.1, np.column_stack([5.0 + 12.0 * t, np.full_like(t, 12.0)]))
    p = perturbation_of_delay(tr, 10.0, 1.0, 1.4)
    assert p.position_noise == pytest.approx(-12.0 * 0.4, abs=1e-9)
    assert p.speed_noise == pytest.approx(0.0, abs=1e-12)


def test_warmup_covers_delay_and_jitter():
    assert warmup_steps(DelayConfig(0.0), 0.1) == 0
    assert warmup_steps(DelayConfig(1.5), 0.1) == 15
    assert warmup_steps(DelayConfig(1.5, stochastic=True, kappa_std=0.1), 0.1) == 18


def test_invalid_delay_config():
    with pytest.raises(ValueError):
        DelayConfig(-0.1)
    with pytest.raises(ValueError):
        TimedTrace(0.0, 0.0, 1)
