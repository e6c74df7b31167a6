from __future__ import annotations

import math

import numpy as np
import pytest

from c2gm.diffusion import (
    NoiseSource,
    SamplerSpec,
    consistent_eps,
    ddim_step,
    ddim_timesteps,
    ddpm_step,
    desk_schedule,
    make_linear_schedule,
    predict_x0,
    q_sample,
    sample,
    schedule_from_betas,
    training_loss,
)
from c2gm.numerics import ContractViolation


@pytest.fixture
def sched():
    return desk_schedule(50)


def test_single_step_schedule():
    s = make_linear_schedule(1, 0.5, 0.5)
    np.testing.assert_allclose(s.alpha_bar, [0.5])


def test_thousand_step_schedule_ends_near_noise():
    s = make_linear_schedule(1000)
    assert s.alpha_bar[-1] < 1e-4
    assert np.all(np.diff(s.alpha_bar) < 0)


def test_desk_schedule_keeps_terminal_signal_small(sched):
    assert sched.alpha_bar[-1] < 1e-4
    assert sched.beta[0] == pytest.approx(2e-3)


@pytest.mark.parametrize("bad", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02)])
def test_schedule_validation(bad):
    with pytest.raises(ContractViolation):
        make_linear_schedule(*bad)


def test_q_sample_substitution():
    s = schedule_from_betas([0.75])
    assert q_sample(np.array(2.0), 1, np.array(1.0), s) == pytest.approx(1.866025, abs=1e-6)


def test_q_sample_degenerate_ends():
    keep = schedule_from_betas([0.0])
    y0, eps = np.array([0.3, -1.0]), np.array([1.0, 2.0])
    np.testing.assert_array_equal(q_sample(y0, 1, eps, keep), y0)
    gone = schedule_from_betas([1.0])
    np.testing.assert_array_equal(q_sample(y0, 1, eps, gone), eps)


def test_q_sample_per_sample_timesteps(sched):
    y0 = np.ones((2, 3))
    eps = np.zeros((2, 3))
    out = q_sample(y0, np.array([1, 50]), eps, sched)
    np.testing.assert_allclose(out[:, 0], np.sqrt(sched.alpha_bar[[0, 49]]))


def test_predict_x0_inverts_q_sample(sched):
    rng = np.random.default_rng(0)
    y0, eps = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    for t in (1, 17, 50):
        assert np.abs(predict_x0(q_sample(y0, t, eps, sched), t, eps, sched) - y0).max() < 1e-9


def test_predict_x0_special_cases(sched):
    y = np.array([0.4, -2.0])
    np.testing.assert_array_equal(predict_x0(y, 0, np.ones(2), sched), y)
    np.testing.assert_allclose(predict_x0(y, 7, np.zeros(2), sched), y / math.sqrt(sched.alpha_bar[6]))


def test_ddpm_single_step_exact_recovery():
    s = schedule_from_betas([0.3])
    y0, eps = np.array([0.5, -0.25]), np.array([1.2, 0.1])
    out = ddpm_step(q_sample(y0, 1, eps, s), 1, eps, s, NoiseSource(0))
    np.testing.assert_allclose(out, y0, atol=1e-12)


def test_ddpm_zero_eps_rescales(sched):
    y = np.array([1.0, 2.0])
    out = ddpm_step(y, 1, np.zeros(2), sched, NoiseSource(0))
    np.testing.assert_allclose(out, y / math.sqrt(sched.alpha[0]))


def test_ddpm_is_seed_deterministic(sched):
    y, e = np.ones(6), np.full(6, 0.1)
    a = ddpm_step(y, 20, e, sched, NoiseSource(5))
    b = ddpm_step(y, 20, e, sched, NoiseSource(5))
    assert np.array_equal(a, b)


def test_ddim_recovers_y0_over_skips(sched):
    rng = np.random.default_rng(3)
    y0, eps = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    for steps in (1, 4, 13, 50):
        ts = ddim_timesteps(50, steps)
        y = q_sample(y0, ts[0], eps, sched)
        for t, tp in zip(ts, ts[1:] + [0]):
            y = ddim_step(y, t, tp, eps, sched)
        assert np.abs(y - y0).max() < 1e-9


def test_ddim_final_hop_is_predict_x0(sched):
    y, e = np.array([0.1, 0.7]), np.array([0.3, -0.2])
    np.testing.assert_array_equal(ddim_step(y, 9, 0, e, sched), predict_x0(y, 9, e, sched))


def test_ddim_rejects_forward_hop(sched):
    with pytest.raises(ContractViolation):
        ddim_step(np.zeros(2), 5, 5, np.zeros(2), sched)


def test_ddim_timesteps_shape():
    ts = ddim_timesteps(50, 25)
    assert ts[0] == 50 and ts[-1] == 1 and len(ts) == 25
    assert ts == sorted(ts, reverse=True)
    assert ddim_timesteps(10, 40) == list(range(10, 0, -1))


def test_training_loss_cases():
    eps = np.random.default_rng(0).standard_normal((2, 3))
    assert training_loss(eps, eps).item() == 0.0
    assert training_loss(np.zeros((2, 3)), np.ones((2, 3))).item() == 1.0


def test_consistent_eps_round_trip(sched):
    rng = np.random.default_rng(1)
    x0, y = rng.standard_normal(5), rng.standard_normal(5)
    e = consistent_eps(y, 30, x0, sched)
    np.testing.assert_allclose(predict_x0(y, 30, e, sched), x0, atol=1e-9)


@pytest.mark.parametrize("kind,steps", [("ddim", 10), ("ddpm", 50)])
def test_sampler_draw_counts(sched, kind, steps):
    spec = SamplerSpec(kind, steps)
    rng = NoiseSource(0)
    sample(lambda z, t: np.zeros_like(z), (1, 2, 3, 3), sched, spec, rng)
    # DDPM draws fresh noise at every step except the last
    expected = 18 if kind == "ddim" else 18 * sched.T
    assert spec.declared_draws(sched, 18) == expected
    assert rng.draws == (18 if kind == "ddim" else 18 * sched.T)


def test_sample_with_oracle_eps_returns_target(sched):
    target = np.random.default_rng(2).uniform(-1, 1, (1, 3, 4, 4))

    def oracle(z, t):
        return consistent_eps(z, t, target, sched)

    for kind in ("ddim", "ddpm"):
        out = sample(oracle, target.shape, sched, SamplerSpec(kind, 7), NoiseSource(4))
        assert np.abs(out - target).max() < 1e-9


def test_clip_bounds_clean_estimate(sched):
    seen = []

    def clip(x0):
        seen.append(float(np.abs(x0).max()))
        return np.clip(x0, -1, 1)

    out = sample(lambda z, t: -3 * z, (1, 1, 4, 4), sched, SamplerSpec("ddim", 5), NoiseSource(0), clip_x0=clip)
    assert len(seen) == 5
    assert np.abs(out).max() <= 1 + 1e-12
