import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tce.diffusion import (
    DEFAULT_SCHEDULE, NoiseSchedule, SamplerConfig, dsm_loss, gaussian_score, pc_chains, pc_sample,
    perturb, sample_tau, sigma,
)
from tce.errors import ContractViolation, NumericFailure
from tce.generator import GenConfig, train_score

from mpmath import expm1 as mexpm1, mp, mpf, sqrt as msqrt


def sigma_hp(tau, amin=0.1, amax=20.0):
    mp.dps = 40
    t = mpf(tau)
    B = mpf(amin) * t + (mpf(amax) - mpf(amin)) * t * t / 2
    return float(msqrt(-mexpm1(-B)))


def test_sigma_closed_form_values():
    assert sigma(0.0) == 0.0
    assert DEFAULT_SCHEDULE.exponent(1.0) == pytest.approx(10.05, rel=1e-15)
    assert sigma(1.0) == pytest.approx(0.9999784, abs=5e-8)
    assert sigma(1.0) == pytest.approx(sigma_hp(1.0), rel=1e-15)
    assert DEFAULT_SCHEDULE.exponent(0.5) == pytest.approx(2.5375, rel=1e-15)
    assert sigma(0.5) == pytest.approx(math.sqrt(1 - math.exp(-2.5375)), rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.01, 5.0), st.floats(0.0, 30.0))
def test_sigma_matches_high_precision(tau, amin, extra):
    sched = NoiseSchedule(amin, amin + extra)
    assert sched.sigma(tau) == pytest.approx(sigma_hp(tau, amin, amin + extra), rel=1e-12, abs=1e-300)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_sigma_is_monotone(t1, t2):
    lo, hi = sorted((t1, t2))
    assert sigma(lo) <= sigma(hi) < 1.0


def test_g2_is_derivative_of_variance():
    for t in (0.05, 0.3, 0.7, 0.95):
        h = 1e-6
        fd = (sigma(t + h) ** 2 - sigma(t - h) ** 2) / (2 * h)
        assert DEFAULT_SCHEDULE.g2(t) == pytest.approx(fd, rel=1e-6)


def test_tau_out_of_range():
    with pytest.raises(ContractViolation):
        sigma(1.5)
    with pytest.raises(ContractViolation):
        sigma(-0.1)
    with pytest.raises(ContractViolation):
        NoiseSchedule(0.0, 1.0)


def test_perturb_examples(rng):
    x0 = rng.normal(size=(4, 3))
    assert np.array_equal(perturb(x0, 0.0, rng.normal(size=(4, 3))), x0)
    assert np.array_equal(perturb(x0, 0.6, np.zeros((4, 3))), x0)
    out = perturb(np.array([1.0, 1.0]), 1.0, np.array([1.0, -1.0]))
    s1 = sigma(1.0)
    assert np.array_equal(out, np.array([1.0 + s1, 1.0 - s1]))
    tau = np.array([0.1, 0.5, 0.9, 1.0])
    z = rng.normal(size=(4, 3))
    assert np.allclose(perturb(x0, tau, z), x0 + sigma(tau)[:, None] * z)
    with pytest.raises(ContractViolation):
        perturb(x0, 0.5, np.zeros((4, 2)))


def test_sample_tau_range(rng):
    t = sample_tau(rng, 1000, 1e-3)
    assert t.min() >= 1e-3 and t.max() <= 1.0
    with pytest.raises(ContractViolation):
        sample_tau(rng, 3, 0.0)


def test_dsm_loss_cheating_oracle_is_zero():
    # a score that knows the injected noise: q = -z / sigma, with z = (x - x0) / sigma
    x0 = np.random.default_rng(6).normal(size=(64, 2))

    def cheat(x, tau, cond):
        s = sigma(tau)[:, None]
        return -(x - x0) / s**2

    assert dsm_loss(cheat, x0, None, np.random.default_rng(5)) < 1e-12


def test_dsm_loss_zero_score_is_chi_square():
    rng = np.random.default_rng(11)
    dim, n = 3, 20000
    vals = [dsm_loss(lambda x, t, c: np.zeros_like(x), np.zeros((n // 20, dim)), None, rng) for _ in range(20)]
    # each entry is a mean of n/20 chi-square(3) draws (variance 2 dim)
    se = math.sqrt(2 * dim / n)
    assert abs(np.mean(vals) - dim) <= 3 * se


def test_dsm_loss_minimized_by_analytic_score(rng):
    x0 = 2.0 + 0.5 * rng.normal(size=(4000, 1))
    exact = gaussian_score(2.0, 0.25)
    wrong = gaussian_score(0.0, 0.25)
    a = dsm_loss(exact, x0, None, np.random.default_rng(1))
    b = dsm_loss(wrong, x0, None, np.random.default_rng(1))
    assert a < b


def test_point_mass_score_is_learned():
    # data = delta at 0: the perturbed law is N(0, sigma^2) with score -x / sigma^2
    rng = np.random.default_rng(3)
    x = np.zeros((2000, 1))
    from dataclasses import replace
    from tce.datasets import Scaler

    cfg = replace(GenConfig(), score_hidden=32, score_blocks=1, embed_width=16, lr=1e-3)
    model = train_score(x, None, 1500, cfg, rng, x_scaler=Scaler(np.zeros(1), np.ones(1)))
    grid = np.linspace(-1.0, 1.0, 9)[:, None]
    for tau in (0.5, 0.9):
        pred = model.score(grid, np.full(9, tau))
        exact = -grid / sigma(tau) ** 2
        assert np.median(np.abs(pred - exact)) < 0.15 * np.abs(exact).max()


def test_gaussian_score_formula():
    f = gaussian_score([2.0, -1.0], 1.0)
    x = np.array([[0.0, 0.0], [2.0, -1.0]])
    tau = np.array([0.5, 0.5])
    s2 = sigma(0.5) ** 2
    assert np.allclose(f(x, tau), [[2.0 / (1 + s2), -1.0 / (1 + s2)], [0.0, 0.0]])


def test_single_step_zero_score_returns_prior_draw():
    cfg = SamplerConfig(K=1)
    out = pc_sample(lambda x, t, c: np.zeros_like(x), 3, None, cfg, DEFAULT_SCHEDULE, np.random.default_rng(4), n=5)
    prior = sigma(1.0) * np.random.default_rng(4).standard_normal((5, 3))
    assert np.array_equal(out, prior)


def test_single_step_linear_score_hand_map():
    # q(x) = -x, K = 1: x_out = x_prior + g2(1) * q = (1 - g2(1)) x_prior
    cfg = SamplerConfig(K=1)
    out = pc_sample(lambda x, t, c: -x, 2, None, cfg, DEFAULT_SCHEDULE, np.random.default_rng(9), n=4)
    prior = sigma(1.0) * np.random.default_rng(9).standard_normal((4, 2))
    g2 = 20.0 * math.exp(-10.05)
    assert np.allclose(out, (1.0 - g2) * prior, rtol=1e-14, atol=0)


def test_corrector_step_hand_computed():
    # K = 2, score 0 except the corrector sees a constant vector field
    from tce.diffusion import _corrector_step

    q = np.array([[3.0, 4.0], [0.0, 5.0]])
    xi = np.array([[1.0, 0.0], [0.0, 2.0]])
    eta = _corrector_step(q, xi, 0.16)
    assert eta == pytest.approx(2 * (0.16 * 1.5 / 5.0) ** 2, rel=1e-15)
    assert _corrector_step(np.zeros((2, 2)), xi, 0.16) == 0.0


def test_sampler_deterministic_given_seed():
    f = gaussian_score([1.0, 0.0], 0.5)
    cfg = SamplerConfig(K=20)
    a = pc_sample(f, 2, None, cfg, DEFAULT_SCHEDULE, np.random.default_rng(8), n=50)
    b = pc_sample(f, 2, None, cfg, DEFAULT_SCHEDULE, np.random.default_rng(8), n=50)
    assert np.array_equal(a, b)


def test_sampler_reports_divergence():
    cfg = SamplerConfig(K=5, corrector_steps=0)
    with pytest.raises(NumericFailure):
        pc_sample(lambda x, t, c: np.full_like(x, np.inf), 2, None, cfg, DEFAULT_SCHEDULE,
                  np.random.default_rng(0), n=3)
    x, ok, step = pc_chains(lambda x, t, c: np.where(x[:, :1] > 0, np.nan, 0.0) * np.ones_like(x),
                            np.array([[1.0, 0.0], [-1.0, 0.0]]), None, cfg, DEFAULT_SCHEDULE,
                            np.random.default_rng(0))
    assert ok.tolist() == [False, True] and step[0] == 5


def test_sampler_conditioning_rows_checked():
    with pytest.raises(ContractViolation):
        pc_sample(lambda x, t, c: -x, 2, np.zeros((3, 1)), SamplerConfig(K=2), DEFAULT_SCHEDULE,
                  np.random.default_rng(0), n=4)


def test_sampler_config_validation():
    with pytest.raises(ContractViolation):
        SamplerConfig(K=0)
    with pytest.raises(ContractViolation):
        SamplerConfig(snr=0.0)


def test_gaussian_fidelity_small():
    mu = np.array([2.0, -1.0])
    out = pc_sample(gaussian_score(mu, 1.0), 2, None, SamplerConfig(K=200), DEFAULT_SCHEDULE,
                    np.random.default_rng(2), n=2000)
    assert np.all(np.abs(out.mean(0) - mu) < 0.1)
    assert np.all(np.abs(out.var(0) - 1.0) < 0.15)
