import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from modal_diffusion.diffusion import (EvalCounter, ModeParams, eps_from_x0, forward_marginal,
                                       forward_step, make_training_pair, make_training_pairs,
                                       marginal_moments, reverse_coefficients, reverse_mean_eps,
                                       reverse_mean_x0, reverse_variance, sample_chain,
                                       sample_chains, training_loss, x0_from_eps)
from modal_diffusion.nn import Denoiser
from modal_diffusion.prior import (Component, MixturePrior, PriorLayoutConfig, build_ring_prior,
                                   build_simplex_prior, standard_prior)
from modal_diffusion.schedule import build_schedule, schedule_from_betas
from modal_diffusion.verify import bayes_posterior_on_grid

S = build_schedule(100, 1e-4, 0.3)


def _hand_schedule(alphas):
    betas = [1 - a for a in alphas]
    return schedule_from_betas(betas, beta_min=min(betas), beta_max=max(betas))


# -- forward ---------------------------------------------------------------------------

def test_forward_step_hand_value():
    # alpha_1 = 0.81, sigma = 2, x_prev = 2, eps = 0.5 and mu chosen so mu / eta_T = 0.5
    s = _hand_schedule([0.81, 0.5])
    mode = ModeParams(0.5 * s.eta_T, 2.0)
    x = forward_step(np.array([2.0]), 1, mode, s, np.array([0.5]))
    # 1.8 + 0.4358898943540674 + 0.5
    assert x[0] == pytest.approx(2.7358898943540674, abs=1e-15)


def test_forward_step_without_noise_only_shifts():
    s = schedule_from_betas([1e-300, 0.1], beta_min=1e-300, beta_max=0.1)
    mode = ModeParams(np.array([1.0, -2.0]), 3.0)
    x = forward_step(np.array([0.5, 0.5]), 1, mode, s, np.ones(2))
    assert np.allclose(x, np.array([0.5, 0.5]) + mode.mu / s.eta_T, atol=1e-140)


def test_forward_marginal_hand_value():
    s = _hand_schedule([0.5, 0.5])        # abar_2 = 0.25
    mode = ModeParams(2.0, 2.0)
    x = forward_marginal(np.array([1.0]), 2, mode, s, np.array([0.1]))
    assert x[0] == pytest.approx(0.5 + math.sqrt(0.75) * 0.2 + 2.0, abs=1e-14)


def test_forward_marginal_half_shift_value():
    # abar_t = 0.25 and eta_t / eta_T = 0.5 hold at t = 1 of alphas (0.25, 1 - 1e-300)
    s = _hand_schedule([0.25, 1 - 1e-16])
    assert s.etas[1] / s.eta_T == pytest.approx(0.5, abs=1e-12)
    x = forward_marginal(np.array([1.0]), 1, ModeParams(2.0, 2.0), s, np.array([0.1]))
    assert x[0] == pytest.approx(1.6732050807568877, abs=1e-12)


def test_standard_mode_reduces_to_ddpm_marginal():
    x0, eps = np.array([0.3, -1.2]), np.array([0.7, 0.1])
    for t in (1, 40, 100):
        got = forward_marginal(x0, t, ModeParams.standard(2), S, eps)
        ref = math.sqrt(S.alpha_bars[t]) * x0 + math.sqrt(1 - S.alpha_bars[t]) * eps
        assert np.allclose(got, ref, atol=1e-12)


def test_terminal_marginal_hits_component():
    s = build_schedule(1000, 1e-4, 0.04)
    mode = ModeParams(np.array([5.0, -3.0]), 0.5)
    x = forward_marginal(np.array([10.0, 10.0]), 1000, mode, s, np.zeros(2))
    assert np.allclose(x, mode.mu, atol=10 * math.sqrt(s.alpha_bars[-1]))


def test_marginal_moments_and_inversions():
    mode = ModeParams(np.array([1.0, 2.0]), 1.5)
    x0 = np.array([0.5, -0.5])
    m, v = marginal_moments(x0, 30, mode, S)
    assert np.allclose(m, math.sqrt(S.alpha_bars[30]) * x0 + S.etas[30] / S.eta_T * mode.mu)
    assert v == pytest.approx((1 - S.alpha_bars[30]) * 2.25)
    eps = np.array([0.3, -0.9])
    x_t = forward_marginal(x0, 30, mode, S, eps)
    assert np.allclose(eps_from_x0(x_t, x0, 30, mode, S), eps, atol=1e-12)
    assert np.allclose(x0_from_eps(x_t, eps, 30, mode, S), x0, atol=1e-12)


@pytest.mark.parametrize("t", [0, 101])
def test_step_range_checked(t):
    mode = ModeParams.standard(1)
    with pytest.raises(IndexError):
        forward_step(np.zeros(1), t, mode, S, np.zeros(1))
    with pytest.raises(IndexError):
        reverse_mean_x0(np.zeros(1), np.zeros(1), t, mode, S)


def test_forward_chain_monte_carlo():
    rng = np.random.default_rng(0)
    s = build_schedule(50, 1e-4, 0.35)
    mode = ModeParams(3.0, 2.0)
    n = 100_000
    x = np.full(n, -1.0)
    for t in range(1, 51):
        x = forward_step(x, t, mode, s, rng.standard_normal(n))
        if t in (1, 25, 50):
            m, v = marginal_moments(-1.0, t, mode, s)
            assert abs(x.mean() - m) < 4 * math.sqrt(v / n)
            assert abs(x.var() - v) < 0.02 * v


# -- reverse ---------------------------------------------------------------------------

def test_t1_returns_clean_prediction_without_noise():
    mode = ModeParams(np.array([4.0, -1.0]), 2.0)
    x0_hat = np.array([0.25, 0.75])
    assert np.array_equal(reverse_mean_x0(np.array([9.0, 9.0]), x0_hat, 1, mode, S), x0_hat)
    assert reverse_variance(1, mode, S) == 0.0


def test_reverse_coefficients_standard():
    for t in (2, 50, 100):
        c_xt, c_x0, c_mu = reverse_coefficients(t, S)
        ab, abp = S.alpha_bars[t], S.alpha_bars[t - 1]
        assert c_xt == pytest.approx(math.sqrt(S.alphas[t]) * (1 - abp) / (1 - ab), rel=1e-13)
        assert c_x0 == pytest.approx(math.sqrt(abp) * S.betas[t] / (1 - ab), rel=1e-13)
        ref_mu = (S.etas[t - 1] * S.betas[t] - math.sqrt(S.alphas[t]) * (1 - abp)) / (
            (1 - ab) * S.eta_T)
        assert c_mu == pytest.approx(ref_mu, rel=1e-12)


def test_variance_scales_with_sigma_squared():
    for t in (1, 2, 77, 100):
        v1 = reverse_variance(t, ModeParams(0.0, 1.0), S)
        v2 = reverse_variance(t, ModeParams(0.0, 2.0), S)
        assert v2 == 4 * v1
        ref = (1 - S.alpha_bars[t - 1]) / (1 - S.alpha_bars[t]) * S.betas[t]
        assert v1 == pytest.approx(ref, rel=1e-12, abs=1e-300)


def test_eps_form_unit_alpha_limit():
    s = schedule_from_betas([1e-300, 0.5], beta_min=1e-300, beta_max=0.5)
    mode = ModeParams(np.array([2.0]), 1.0)
    x = np.array([1.0])
    got = reverse_mean_eps(x, np.array([3.0]), 1, mode, s)
    assert got[0] == pytest.approx(1.0 - 2.0 / s.eta_T, abs=1e-12)


@given(t=st.integers(1, 100), mu=st.floats(-10, 10), sigma=st.floats(0.1, 5),
       x0=st.floats(-5, 5), xt=st.floats(-20, 20))
def test_parameterizations_agree(t, mu, sigma, x0, xt):
    mode = ModeParams(np.array([mu]), sigma)
    x0_hat, x_t = np.array([x0]), np.array([xt])
    eps = eps_from_x0(x_t, x0_hat, t, mode, S)
    a = reverse_mean_x0(x_t, x0_hat, t, mode, S)
    b = reverse_mean_eps(x_t, eps, t, mode, S)
    assert abs(a[0] - b[0]) <= 1e-10 * max(1.0, abs(eps[0]))


@pytest.mark.parametrize("t", [2, 10, 20])
@pytest.mark.parametrize("mu,sigma", [(0.0, 1.0), (2.0, 1.5), (-3.0, 0.5)])
def test_bayes_grid_matches_closed_form(t, mu, sigma):
    s = build_schedule(20, 0.05, 0.4)
    mode = ModeParams(mu, sigma)
    grid = np.linspace(-10, 10, 2001)
    x0 = 0.7
    x_t = math.sqrt(s.alpha_bars[t]) * x0 + s.etas[t] / s.eta_T * mu + 0.3 * sigma
    mass, mean, var = bayes_posterior_on_grid(x0, x_t, t, mode, s, grid)
    assert abs(mass - 1) < 1e-6
    assert abs(mean - float(reverse_mean_x0(x_t, x0, t, mode, s))) < 1e-6
    assert abs(var - reverse_variance(t, mode, s)) < 1e-6


def test_bayes_grid_independent_of_scipy():
    # same posterior from scipy densities, as a cross-check of the oracle itself
    s = build_schedule(20, 0.05, 0.4)
    t, x0, x_t, mu, sig = 10, 0.5, 1.2, 2.0, 1.5
    y = np.linspace(-10, 10, 2001)
    w = (stats.norm.pdf(x_t, math.sqrt(s.alphas[t]) * y + mu / s.eta_T,
                        math.sqrt(s.betas[t]) * sig)
         * stats.norm.pdf(y, math.sqrt(s.alpha_bars[t - 1]) * x0 + s.etas[t - 1] / s.eta_T * mu,
                          math.sqrt(1 - s.alpha_bars[t - 1]) * sig))
    m = np.sum(w * y) / np.sum(w)
    assert m == pytest.approx(float(reverse_mean_x0(x_t, x0, t, ModeParams(mu, sig), s)),
                              abs=1e-9)


# -- training pairs ------------------------------------------------------------------------

@pytest.mark.filterwarnings("ignore::modal_diffusion.prior.SeparationWarning")
def test_training_pair_reconstructs_exactly():
    prior = build_simplex_prior(PriorLayoutConfig(3, 3, 2.0), sigmas=[0.5, 1.0, 1.5])
    rng = np.random.default_rng(4)
    b = make_training_pairs(rng.standard_normal((64, 3)), rng.integers(0, 3, 64), prior, S, rng)
    for i in range(64):
        mode = ModeParams.of(prior, int(b.label[i]))
        assert np.array_equal(forward_marginal(b.x0[i], int(b.t[i]), mode, S, b.eps[i]), b.x_t[i])
    p = make_training_pair(np.ones(3), 1, prior, S, rng)
    assert np.array_equal(p.x_t, forward_marginal(p.x0, p.t, ModeParams.of(prior, 1), S, p.eps))


def test_zero_sigma_pair_is_deterministic():
    prior = MixturePrior((Component(np.array([3.0, 3.0]), 0.0, 1.0),), "empirical")
    rng = np.random.default_rng(0)
    x0 = np.array([1.0, -1.0])
    for _ in range(50):
        p = make_training_pair(x0, 0, prior, S, rng)
        if p.t == S.T:
            assert np.array_equal(p.x_t, math.sqrt(S.alpha_bars[-1]) * x0 + np.array([3.0, 3.0]))


def test_pair_label_out_of_range():
    with pytest.raises(IndexError):
        make_training_pair(np.zeros(2), 1, standard_prior(2), S, np.random.default_rng(0))


def test_timestep_sampler_is_uniform():
    rng = np.random.default_rng(5)
    n = 1_000_000
    prior = standard_prior(1)
    b = make_training_pairs(np.zeros((n, 1)), np.zeros(n, int), prior, S, rng)
    counts = np.bincount(b.t, minlength=S.T + 1)[1:]
    chi2 = float(np.sum((counts - n / S.T) ** 2 / (n / S.T)))
    assert chi2 < stats.chi2.ppf(0.999, S.T - 1)
    assert b.t.min() >= 1 and b.t.max() <= S.T


def test_training_loss_examples(oracle_model):
    rng = np.random.default_rng(0)
    prior = standard_prior(2)
    x0 = np.tile([1.0, -2.0], (16, 1))
    b = make_training_pairs(x0, np.zeros(16, int), prior, S, rng)
    assert training_loss(oracle_model([1.0, -2.0]), b) == 0.0
    zero = Denoiser(2, (8,), 4, rng=rng)
    for k in zero.params:
        zero.params[k][:] = 0
    assert training_loss(zero, b) == pytest.approx(5.0)
    perm = rng.permutation(16)
    b2 = type(b)(b.x0[perm], b.label[perm], b.t[perm], b.eps[perm], b.x_t[perm])
    m = Denoiser(2, (8,), 4, rng=rng)
    assert training_loss(m, b) == pytest.approx(training_loss(m, b2), rel=1e-15)


# -- sampling ------------------------------------------------------------------------------

def test_oracle_chain_telescopes_to_target(oracle_model):
    x_star = np.array([1.5, -0.5])
    for prior in (standard_prior(2), build_ring_prior(PriorLayoutConfig(4, 2, 4.0))):
        x, _ = sample_chains(oracle_model(x_star), prior, S, np.random.default_rng(0), 32,
                             noise=False)
        assert np.max(np.abs(x - x_star)) < 1e-8
        x, _ = sample_chains(oracle_model(x_star), prior, S, np.random.default_rng(0), 32)
        assert np.max(np.abs(x - x_star)) < 1e-8   # t=1 returns x0_hat exactly


def test_sampling_is_deterministic_and_counts_steps(small_schedule):
    m = Denoiser(2, (16,), 8, rng=np.random.default_rng(0))
    prior = build_ring_prior(PriorLayoutConfig(4, 2, 4.0))
    c = EvalCounter()
    a = sample_chains(m, prior, small_schedule, np.random.default_rng(3), 20, counter=c)
    b = sample_chains(m, prior, small_schedule, np.random.default_rng(3), 20)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert c.model_evals == small_schedule.T and c.steps == small_schedule.T


def test_zero_guidance_is_bit_exact(small_schedule):
    m = Denoiser(2, (16,), 8, rng=np.random.default_rng(0))
    prior = build_ring_prior(PriorLayoutConfig(4, 2, 4.0))

    def zero(**kw):
        return np.zeros_like(kw["x"])
    a = sample_chains(m, prior, small_schedule, np.random.default_rng(3), 20)
    b = sample_chains(m, prior, small_schedule, np.random.default_rng(3), 20, guidance=zero)
    assert np.array_equal(a[0], b[0])


def test_component_fixed_for_whole_chain(small_schedule):
    m = Denoiser(2, (16,), 8, rng=np.random.default_rng(0))
    prior = build_ring_prior(PriorLayoutConfig(4, 2, 4.0))
    trace = []
    x, idx = sample_chains(m, prior, small_schedule, np.random.default_rng(3), 10, trace=trace)
    assert [st.t for st in trace] == list(range(small_schedule.T, -1, -1))
    assert all(np.array_equal(st.component_index, idx) for st in trace)
    x1, i1 = sample_chain(m, prior, small_schedule, np.random.default_rng(3), component=2)
    assert i1 == 2 and x1.shape == (2,)


def test_dimension_mismatch_rejected(small_schedule):
    m = Denoiser(3, (8,), 4, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_chains(m, standard_prior(2), small_schedule, np.random.default_rng(0))


def test_non_finite_output_raises(small_schedule, oracle_model):
    with pytest.raises(FloatingPointError):
        sample_chains(oracle_model([np.nan, 0.0]), standard_prior(2), small_schedule,
                      np.random.default_rng(0))


def test_noise_parameterized_sampler_runs(small_schedule):
    m = Denoiser(2, (16,), 8, parameterization="noise", rng=np.random.default_rng(0))
    x, _ = sample_chains(m, standard_prior(2), small_schedule, np.random.default_rng(1), 5)
    assert np.all(np.isfinite(x))
