import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from posdiffae.diffusion import (
    ALPHA_BAR_ZERO, build_schedule, forward_noise, from_model_range, posterior_step,
    schedule_from_betas, strided_timesteps, terminal_step, to_model_range,
)


def test_default_schedule_has_1000_entries(schedule):
    assert schedule.T == 1000
    assert schedule.betas.shape == (1000,)
    assert schedule.alphas_bar.shape == (1000,)
    assert schedule.betas[0] == pytest.approx(1e-4)
    assert schedule.betas[-1] == pytest.approx(0.02)


def test_single_step_schedule():
    s = build_schedule(1, 0.1, 0.1)
    np.testing.assert_allclose(s.alphas_bar, [0.9], rtol=0, atol=1e-15)


def test_hand_cumprod_oracle():
    s = schedule_from_betas([0.1, 0.2, 0.3])
    np.testing.assert_allclose(s.alphas_bar, [0.9, 0.72, 0.504], rtol=0, atol=1e-15)


def test_schedule_invariants(schedule):
    b, ab = schedule.betas, schedule.alphas_bar
    assert np.all((b > 0) & (b < 1))
    assert np.all(np.diff(b) >= 0)
    assert np.all(np.diff(ab) < 0)
    assert np.all((ab > 0) & (ab < 1))
    assert ab[0] == 1.0 - b[0]


def test_alphas_bar_matches_naive_product(schedule):
    naive = []
    acc = 1.0
    for beta in schedule.betas:
        acc *= 1.0 - beta
        naive.append(acc)
    np.testing.assert_array_equal(schedule.alphas_bar, np.array(naive))


def test_schedule_tables_are_read_only(schedule):
    with pytest.raises(ValueError):
        schedule.betas[0] = 0.5


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_build_schedule_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        build_schedule(*args)


def test_alpha_bar_zero_convention(schedule):
    assert ALPHA_BAR_ZERO == 1.0
    assert schedule.alpha_bar(0) == 1.0
    with pytest.raises(ValueError):
        schedule.alpha_bar(1001)


def test_forward_zero_noise(schedule):
    x0 = np.random.default_rng(0).normal(size=(3, 4, 4))
    st_ = forward_noise(x0, 500, np.zeros_like(x0), schedule)
    np.testing.assert_allclose(st_.x_t, math.sqrt(schedule.alpha_bar(500)) * x0)
    assert st_.t == 500


def test_forward_identity_endpoint(schedule):
    x0 = np.random.default_rng(1).normal(size=(3, 4, 4))
    st_ = forward_noise(x0, 0, np.ones_like(x0), schedule)
    np.testing.assert_array_equal(st_.x_t, x0)


def test_forward_scalar_oracle():
    # a single-step schedule with beta = 0.75 has alpha_bar = 0.25
    s = schedule_from_betas([0.75])
    out = forward_noise(np.ones((2, 2)), 1, np.ones((2, 2)), s)
    np.testing.assert_allclose(out.x_t, 0.5 + math.sqrt(0.75), atol=1e-15)
    np.testing.assert_array_equal(out.epsilon, np.ones((2, 2)))


def test_forward_shape_mismatch(schedule):
    with pytest.raises(ValueError):
        forward_noise(np.zeros((3, 4, 4)), 5, np.zeros((3, 4, 5)), schedule)


def test_forward_works_on_torch(schedule):
    x0 = torch.zeros(2, 3, 4, 4)
    out = forward_noise(x0, 10, torch.ones_like(x0), schedule)
    assert torch.allclose(out.x_t, torch.full_like(x0, math.sqrt(1 - schedule.alpha_bar(10))))


def test_posterior_noise_free_residual(schedule):
    x0 = np.random.default_rng(2).normal(size=(3, 4, 4))
    t = 300
    x_t = math.sqrt(schedule.alpha_bar(t)) * x0
    out = posterior_step(x_t, x0, t, schedule)
    np.testing.assert_allclose(out, math.sqrt(schedule.alpha_bar(t - 1)) * x0, atol=1e-12)


def test_posterior_pure_residual(schedule):
    x_t = np.random.default_rng(3).normal(size=(3, 4, 4))
    t = 700
    out = posterior_step(x_t, np.zeros_like(x_t), t, schedule)
    k = math.sqrt((1 - schedule.alpha_bar(t - 1)) / (1 - schedule.alpha_bar(t)))
    np.testing.assert_allclose(out, k * x_t, atol=1e-12)


def test_posterior_scalar_oracle():
    # betas chosen so that alpha_bar(1) = 0.8 and alpha_bar(2) = 0.5
    s = schedule_from_betas([0.2, 1 - 0.5 / 0.8])
    assert s.alpha_bar(1) == pytest.approx(0.8)
    assert s.alpha_bar(2) == pytest.approx(0.5)
    out = posterior_step(np.ones(1), np.ones(1), 2, s)
    expected = math.sqrt(0.8) + math.sqrt(0.2) * (1 - math.sqrt(0.5)) / math.sqrt(0.5)
    assert out[0] == pytest.approx(expected, abs=1e-12)
    assert out[0] == pytest.approx(1.0797, abs=1e-4)


def test_posterior_rejects_t1_and_bad_prev(schedule):
    x = np.zeros((2, 2))
    with pytest.raises(ValueError, match="terminal_step"):
        posterior_step(x, x, 1, schedule)
    with pytest.raises(ValueError):
        posterior_step(x, x, 10, schedule, t_prev=10)
    with pytest.raises(ValueError):
        posterior_step(x, np.zeros((2, 3)), 10, schedule)


def test_terminal_step_identity():
    rng = np.random.default_rng(4)
    r = rng.normal(size=(3, 8, 8))
    stored = r.tobytes()
    out = terminal_step(rng.normal(size=r.shape), r)
    assert out.tobytes() == stored
    z = np.zeros((3, 2, 2))
    assert np.array_equal(terminal_step(np.ones_like(z), z), z)


def test_marginal_moments(schedule):
    rng = np.random.default_rng(5)
    n = 100_000
    for t in (1, 250, 1000):
        ab = schedule.alpha_bar(t)
        x0 = np.full(n, 0.7)
        xt = forward_noise(x0, t, rng.standard_normal(n), schedule).x_t
        sigma = math.sqrt(1 - ab)
        assert abs(xt.mean() - math.sqrt(ab) * 0.7) < 3 * sigma / math.sqrt(n)
        assert abs(xt.var() - (1 - ab)) < 0.02 * (1 - ab)


def test_oracle_round_trip(schedule):
    rng = np.random.default_rng(6)
    x0 = rng.uniform(-1, 1, size=(3, 8, 8))
    x = forward_noise(x0, schedule.T, rng.standard_normal(x0.shape), schedule).x_t
    for t in range(schedule.T, 1, -1):
        x = posterior_step(x, x0, t, schedule)
    x = terminal_step(x, x0)
    assert np.abs(x - x0).max() < 1e-5


def test_oracle_round_trip_strided(schedule):
    rng = np.random.default_rng(7)
    x0 = rng.uniform(-1, 1, size=(3, 8, 8))
    ts = strided_timesteps(50, schedule.T)
    x = forward_noise(x0, ts[0], rng.standard_normal(x0.shape), schedule).x_t
    for t, t_prev in zip(ts[:-1], ts[1:]):
        x = posterior_step(x, x0, t, schedule, t_prev)
    # before the last step only the t=1 noise level remains
    assert np.abs(x - x0).max() < 0.05
    assert np.abs(terminal_step(x, x0) - x0).max() < 1e-5


@given(st.integers(1, 200), st.integers(1, 1000))
def test_strided_timesteps_properties(n, t_max):
    ts = strided_timesteps(n, t_max)
    assert ts[0] == t_max
    assert len(ts) == len(set(ts))
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert all(1 <= t <= t_max for t in ts)
    if n > 1:
        assert ts[-1] == 1
        assert len(ts) == min(n, t_max)


def test_strided_timesteps_full_range():
    assert strided_timesteps(50, 20) == list(range(20, 0, -1))
    assert strided_timesteps(1, 1000) == [1000]
    with pytest.raises(ValueError):
        strided_timesteps(0, 10)


@given(st.floats(0, 1))
def test_model_range_round_trip(v):
    assert from_model_range(to_model_range(v)) == pytest.approx(v, abs=1e-12)
    assert -1 <= to_model_range(v) <= 1
