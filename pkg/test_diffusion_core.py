#!/usr/bin/env python3
"""
Tests for noise schedules, forward noising, posterior steps, guidance and window sampling.
"""

import math

import numpy as np
import pytest
import torch

import config
from denoiser import DenoiserConfig, ReactionDenoiser
from diffusion_core import (
    GuidanceConfig, NoiseSchedule, build_schedule, cfg_combine, cosine_alpha_bar,
    forward_diffuse, posterior_step, sample_window,
)
from errors import InvalidInputError


def _tiny_model(seed=0):
    torch.manual_seed(seed)
    cfg = DenoiserConfig(layers=1, hidden=16, heads=2, time_embed_dim=8, text_embed_dim=8,
                         history_frames=4, window_frames=6)
    return ReactionDenoiser(cfg).double()


def _history(seed=1, h=4):
    return np.random.default_rng(seed).normal(size=(h, config.FRAME_DIM))


# --- schedules --------------------------------------------------------------

def test_single_step_schedule():
    sched = build_schedule(1)
    assert sched.alphas_cumprod.shape == (1,)
    assert sched.alphas_cumprod[0] == sched.alphas[0]


@pytest.mark.parametrize('kind', ['cosine', 'linear'])
@pytest.mark.parametrize('T', [1, 2, 8, 50, 1000])
def test_schedule_contract(kind, T):
    sched = build_schedule(T, kind)
    assert np.all(np.diff(sched.alphas_cumprod) < 0)
    assert np.all((sched.alphas_cumprod > 0) & (sched.alphas_cumprod < 1))
    assert np.all((sched.alphas > 0) & (sched.alphas < 1))
    assert np.allclose(sched.alphas_cumprod, np.cumprod(sched.alphas), rtol=0, atol=1e-12)


def test_cosine_schedule_matches_closed_form():
    T = 8
    sched = build_schedule(T, 'cosine')
    f0 = math.cos(0.008 / 1.008 * math.pi / 2) ** 2
    for t in range(T - 1):
        expected = math.cos(((t + 1) / T + 0.008) / 1.008 * math.pi / 2) ** 2 / f0
        assert abs(sched.alphas_cumprod[t] - expected) < 1e-12
    # final beta is capped at 0.999
    assert abs(sched.alphas_cumprod[-1] - sched.alphas_cumprod[-2] * 0.001) < 1e-15
    assert cosine_alpha_bar(0.0) == pytest.approx(f0)


def test_schedule_rejects_bad_step_count():
    with pytest.raises(InvalidInputError):
        build_schedule(0)
    with pytest.raises(InvalidInputError):
        build_schedule(8, 'sigmoid')


# --- forward diffusion ------------------------------------------------------

def test_zero_signal_is_scaled_noise():
    sched = build_schedule(8)
    noise = np.random.default_rng(0).normal(size=(5, 7))
    z_t = forward_diffuse(np.zeros_like(noise), 3, noise, sched)
    assert np.allclose(z_t, math.sqrt(1 - sched.alphas_cumprod[3]) * noise)


def test_forward_diffuse_moments():
    sched = build_schedule(8)
    rng = np.random.default_rng(1)
    n, t, z0 = 100_000, 4, 0.7
    samples = forward_diffuse(np.full(n, z0), t, rng.standard_normal(n), sched)
    sigma = math.sqrt(1 - sched.alphas_cumprod[t])
    assert abs(samples.mean() - math.sqrt(sched.alphas_cumprod[t]) * z0) < 3 * sigma / math.sqrt(n)
    assert abs(samples.var() / sigma ** 2 - 1) < 0.02


def test_chained_steps_match_closed_form():
    sched = build_schedule(8)
    rng = np.random.default_rng(2)
    n, t, z0 = 100_000, 5, -1.2
    z = np.full(n, z0)
    for s in range(t + 1):
        z = math.sqrt(sched.alphas[s]) * z + math.sqrt(sched.betas[s]) * rng.standard_normal(n)
    closed = forward_diffuse(np.full(n, z0), t, rng.standard_normal(n), sched)
    sigma = math.sqrt(1 - sched.alphas_cumprod[t])
    assert abs(z.mean() - closed.mean()) < 6 * sigma / math.sqrt(n)
    assert abs(z.var() / closed.var() - 1) < 0.03


def test_forward_diffuse_accepts_per_sample_steps():
    sched = build_schedule(8)
    z0 = torch.ones(3, 2, 4, dtype=torch.float64)
    noise = torch.zeros_like(z0)
    z_t = forward_diffuse(z0, torch.tensor([0, 3, 7]), noise, sched)
    assert torch.allclose(z_t[:, 0, 0], torch.tensor(np.sqrt(sched.alphas_cumprod[[0, 3, 7]])))


def test_forward_diffuse_step_out_of_range():
    sched = build_schedule(8)
    with pytest.raises(InvalidInputError):
        forward_diffuse(np.zeros(3), 8, np.zeros(3), sched)


# --- posterior / guidance ---------------------------------------------------

def test_posterior_terminal_step_returns_prediction():
    sched = build_schedule(8)
    z0_hat = np.arange(4.0)
    assert posterior_step(np.ones(4), z0_hat, 0, sched, np.ones(4)) is z0_hat


def test_posterior_mean_scalar_oracle():
    sched = NoiseSchedule('custom', np.array([0.1, 0.2, 0.3]))
    abar = np.cumprod([0.9, 0.8, 0.7])
    z_t, z0_hat, t = 0.4, -1.5, 2
    expected = (math.sqrt(abar[1]) * 0.3 / (1 - abar[2])) * z0_hat \
        + (math.sqrt(0.7) * (1 - abar[1]) / (1 - abar[2])) * z_t
    assert posterior_step(np.array(z_t), np.array(z0_hat), t, sched) == pytest.approx(expected, abs=1e-14)
    variance = 0.3 * (1 - abar[1]) / (1 - abar[2])
    assert sched.posterior_variance[2] == pytest.approx(variance)


def test_posterior_step_out_of_range():
    with pytest.raises(InvalidInputError):
        posterior_step(np.zeros(2), np.zeros(2), 8, build_schedule(8))


def test_cfg_combine():
    a = np.random.default_rng(3).normal(size=10)
    b = np.random.default_rng(4).normal(size=10)
    assert np.array_equal(cfg_combine(a, b, 0.0), a)
    assert np.array_equal(cfg_combine(a, b, 1.0), b)
    assert cfg_combine(np.zeros(1), np.ones(1), 5.0)[0] == 5.0
    assert np.allclose(cfg_combine(a, a, 5.0), a)


def test_guidance_config_validation():
    with pytest.raises(InvalidInputError):
        GuidanceConfig(w=-1.0)
    with pytest.raises(InvalidInputError):
        GuidanceConfig(mask_rate=1.5)


# --- sampling ---------------------------------------------------------------

def test_sample_window_shape_and_determinism():
    model, history = _tiny_model(), _history()
    first = sample_window(model, history, 'mirror', build_schedule(8), GuidanceConfig(), rng_seed=11)
    second = sample_window(model, history, 'mirror', build_schedule(8), GuidanceConfig(), rng_seed=11)
    assert tuple(first.shape) == (6, config.FRAME_DIM)
    assert torch.equal(first, second)


def test_single_step_sampling_is_the_prediction():
    model, history = _tiny_model(), _history()
    out = sample_window(model, history, None, build_schedule(1), GuidanceConfig(), rng_seed=5)
    generator = torch.Generator().manual_seed(5)
    z = torch.randn((1, 6, config.FRAME_DIM), generator=generator, dtype=torch.float64)
    with torch.no_grad():
        expected = model(z, torch.as_tensor(history)[None], torch.tensor([0]), model.text_condition([None]))
    assert torch.allclose(out, expected[0], atol=1e-12)


def test_unconditional_sampling_skips_guidance():
    model, history = _tiny_model(), _history()
    sched = build_schedule(4)
    out = sample_window(model, history, None, sched, GuidanceConfig(w=5.0), rng_seed=2)
    generator = torch.Generator().manual_seed(2)
    hist = torch.as_tensor(history)[None]
    null = model.text_condition([None])
    z = torch.randn((1, 6, config.FRAME_DIM), generator=generator, dtype=torch.float64)
    with torch.no_grad():
        for t in reversed(range(sched.T)):
            pred = model(z, hist, torch.tensor([t]), null)
            noise = torch.randn(z.shape, generator=generator, dtype=torch.float64) if t > 0 else None
            z = posterior_step(z, pred, t, sched, noise)
    assert torch.allclose(out, z[0], atol=1e-12)


def test_denoiser_calls_per_step():
    model, history = _tiny_model(), _history()
    calls = []
    model.register_forward_hook(lambda *args: calls.append(1))
    sample_window(model, history, None, build_schedule(3), rng_seed=0)
    assert len(calls) == 3
    calls.clear()
    sample_window(model, history, 'handshake', build_schedule(3), rng_seed=0)
    assert len(calls) == 6


def test_sample_window_rejects_wrong_history_length():
    with pytest.raises(InvalidInputError):
        sample_window(_tiny_model(), _history(h=5), None, build_schedule(2))
