"""Shifted forward process and its matched reverse process.

Every chain is tied to one prior component ``(mu, sigma)``.  The forward step
is ``x_t = sqrt(a_t) x_{t-1} + sqrt(1 - a_t) sigma eps + mu / eta_T``, whose
marginal is ``N(sqrt(abar_t) x0 + (eta_t / eta_T) mu, (1 - abar_t) sigma^2 I)``
and whose terminal law approaches ``N(mu, sigma^2 I)``.  With ``mu = 0`` and
``sigma = 1`` everything reduces to plain DDPM.

Functions accept a single vector or a batch (rows).  ``mu`` may be a vector or
a per-row array; ``sigma`` a scalar or an array that broadcasts against the
batch, e.g. shape ``(n, 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .prior import MixturePrior, sample_prior_batch
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class ModeParams:
    mu: np.ndarray
    sigma: float

    @classmethod
    def of(cls, prior: MixturePrior, i: int) -> "ModeParams":
        c = prior.components[i]
        return cls(c.mean, c.sigma)

    @classmethod
    def standard(cls, dim: int) -> "ModeParams":
        return cls(np.zeros(dim), 1.0)


@dataclass(frozen=True)
class TrainingPair:
    """A batch of noisy training pairs (rows share an index)."""
    x0: np.ndarray
    label: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    x_t: np.ndarray


def _coef(arr: np.ndarray, t):
    """Schedule entry at step ``t``; per-row column when ``t`` is an array."""
    v = arr[t]
    return v[..., None] if np.ndim(v) else v


def _check(s: NoiseSchedule, t) -> None:
    lo, hi = np.min(t), np.max(t)
    if lo < 1 or hi > s.T:
        raise IndexError(f"step outside [1, {s.T}]")


# -- forward ------------------------------------------------------------------

def forward_step(x_prev, t, mode: ModeParams, s: NoiseSchedule, eps) -> np.ndarray:
    _check(s, t)
    a = _coef(s.alphas, t)
    b = _coef(s.betas, t)
    return np.sqrt(a) * x_prev + np.sqrt(b) * mode.sigma * eps + mode.mu / s.eta_T


def forward_marginal(x0, t, mode: ModeParams, s: NoiseSchedule, eps) -> np.ndarray:
    _check(s, t)
    ab = _coef(s.alpha_bars, t)
    om = _coef(s.one_minus_alpha_bars, t)
    shift = _coef(s.etas, t) / s.eta_T
    return np.sqrt(ab) * x0 + np.sqrt(om) * mode.sigma * eps + shift * mode.mu


def marginal_moments(x0, t, mode: ModeParams, s: NoiseSchedule):
    """Mean and per-coordinate variance of q(x_t | x0)."""
    _check(s, t)
    mean = math.sqrt(s.alpha_bars[t]) * np.asarray(x0) + (s.etas[t] / s.eta_T) * mode.mu
    return mean, s.one_minus_alpha_bars[t] * mode.sigma ** 2


def eps_from_x0(x_t, x0_hat, t, mode: ModeParams, s: NoiseSchedule) -> np.ndarray:
    """Invert the marginal: the noise that maps ``x0_hat`` to ``x_t``."""
    ab = _coef(s.alpha_bars, t)
    om = _coef(s.one_minus_alpha_bars, t)
    shift = _coef(s.etas, t) / s.eta_T
    return (x_t - np.sqrt(ab) * x0_hat - shift * mode.mu) / (np.sqrt(om) * mode.sigma)


def x0_from_eps(x_t, eps_hat, t, mode: ModeParams, s: NoiseSchedule) -> np.ndarray:
    ab = _coef(s.alpha_bars, t)
    om = _coef(s.one_minus_alpha_bars, t)
    shift = _coef(s.etas, t) / s.eta_T
    return (x_t - np.sqrt(om) * mode.sigma * eps_hat - shift * mode.mu) / np.sqrt(ab)


# -- reverse ------------------------------------------------------------------

def reverse_coefficients(t: int, s: NoiseSchedule):
    """Posterior-mean weights on ``(x_t, x0, mu)`` at step ``t``."""
    s.check_step(t)
    a = s.alphas[t]
    b = s.betas[t]
    om_prev = s.one_minus_alpha_bars[t - 1]
    om = s.one_minus_alpha_bars[t]
    c_xt = math.sqrt(a) * om_prev / om
    c_x0 = math.sqrt(s.alpha_bars[t - 1]) * b / om
    c_mu = (s.etas[t - 1] * b - math.sqrt(a) * om_prev) / (om * s.eta_T)
    return c_xt, c_x0, c_mu


def reverse_mean_x0(x_t, x0_hat, t: int, mode: ModeParams, s: NoiseSchedule) -> np.ndarray:
    c_xt, c_x0, c_mu = reverse_coefficients(t, s)
    return c_xt * x_t + c_x0 * x0_hat + c_mu * mode.mu


def reverse_mean_eps(x_t, eps_hat, t: int, mode: ModeParams, s: NoiseSchedule) -> np.ndarray:
    s.check_step(t)
    a = s.alphas[t]
    k = s.betas[t] / math.sqrt(s.one_minus_alpha_bars[t])
    return (x_t - mode.mu / s.eta_T - k * mode.sigma * eps_hat) / math.sqrt(a)


def reverse_variance(t: int, mode: ModeParams, s: NoiseSchedule):
    s.check_step(t)
    return s.one_minus_alpha_bars[t - 1] / s.one_minus_alpha_bars[t] * s.betas[t] * mode.sigma ** 2


# -- training pairs and loss ----------------------------------------------------

def make_training_pairs(x0, labels, prior: MixturePrior, s: NoiseSchedule,
                        rng: np.random.Generator) -> TrainingPair:
    """Noisy samples for a batch of clean points coupled to their components.

    Draws ``t ~ U{1..T}`` then ``eps ~ N(0, I)`` (in that order).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.min() < 0 or labels.max() >= prior.k:
        raise IndexError(f"label outside [0, {prior.k})")
    n = x0.shape[0]
    t = rng.integers(1, s.T + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    mode = ModeParams(prior.means[labels], prior.sigmas[labels][:, None])
    x_t = forward_marginal(x0, t, mode, s, eps)
    return TrainingPair(x0, labels, t, eps, x_t)


def make_training_pair(x0, label: int, prior: MixturePrior, s: NoiseSchedule,
                       rng: np.random.Generator) -> TrainingPair:
    p = make_training_pairs(np.asarray(x0)[None, :], [label], prior, s, rng)
    return TrainingPair(p.x0[0], int(p.label[0]), int(p.t[0]), p.eps[0], p.x_t[0])


def training_loss(model, batch: TrainingPair, labels=None) -> float:
    from .nn import training_loss as _loss
    return _loss(model, batch, labels)


# -- sampling -------------------------------------------------------------------

@dataclass
class SampleState:
    x: np.ndarray
    t: int
    component_index: np.ndarray


@dataclass
class EvalCounter:
    model_evals: int = 0
    model_vjps: int = 0
    classifier_grads: int = 0
    steps: int = 0


# A guidance hook returns a noise-space perturbation Delta eps for the batch.
Guidance = Callable[..., np.ndarray]


def predict(model, x, t: int, mode: ModeParams, s: NoiseSchedule, labels=None,
            counter: EvalCounter | None = None):
    """Model output as ``(x0_hat, eps_hat)``; exactly one of them is computed."""
    out = model.forward(x, t, labels)
    if counter is not None:
        counter.model_evals += 1
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite model output at step {t}")
    if model.parameterization == "clean":
        return out, None
    return None, out


def reverse_step(model, x, t: int, mode: ModeParams, s: NoiseSchedule,
                 rng: np.random.Generator | None, *, guidance: Guidance | None = None,
                 labels=None, clip: float | None = None,
                 counter: EvalCounter | None = None) -> np.ndarray:
    """One ancestral step ``x_t -> x_{t-1}``; no noise is added at ``t = 1``.

    Guidance perturbs the noise estimate.  For clean-prediction models the
    perturbation is applied as the equivalent clean-space correction
    ``x0_hat - sqrt(1 - abar_t) sigma / sqrt(abar_t) * Delta eps``, which is
    exact zero when the perturbation is.
    """
    x0_hat, eps_hat = predict(model, x, t, mode, s, labels, counter)
    if guidance is not None:
        d_eps = guidance(model=model, x=x, t=t, mode=mode, s=s, x0_hat=x0_hat,
                         eps_hat=eps_hat, labels=labels, counter=counter)
        if x0_hat is not None:
            k = math.sqrt(s.one_minus_alpha_bars[t]) / math.sqrt(s.alpha_bars[t])
            x0_hat = x0_hat - k * mode.sigma * d_eps
        else:
            eps_hat = eps_hat + d_eps
    if x0_hat is not None:
        if clip is not None:
            x0_hat = np.clip(x0_hat, -clip, clip)
        mean = reverse_mean_x0(x, x0_hat, t, mode, s)
    else:
        mean = reverse_mean_eps(x, eps_hat, t, mode, s)
    if counter is not None:
        counter.steps += 1
    if t == 1 or rng is None:
        return mean
    z = rng.standard_normal(np.shape(x))
    return mean + np.sqrt(reverse_variance(t, mode, s)) * z


def sample_chains(model, prior: MixturePrior, s: NoiseSchedule, rng: np.random.Generator,
                  n: int = 1, component: int | None = None, *,
                  guidance: Guidance | None = None, labels=None, noise: bool = True,
                  clip: float | None = None, counter: EvalCounter | None = None,
                  trace: list | None = None):
    """Run ``n`` independent reverse chains from the prior.

    ``component=None`` samples component indices from the mixture weights;
    each chain then stays conditioned on its component for all T steps.
    ``noise=False`` zeroes every reverse-step noise draw (the prior draw is
    kept).  Returns ``(x0, component_indices)``.
    """
    if model.dim != prior.dim:
        raise ValueError(f"model dimension {model.dim} != prior dimension {prior.dim}")
    x, idx = sample_prior_batch(prior, n, rng, component)
    mode = ModeParams(prior.means[idx], prior.sigmas[idx][:, None])
    if trace is not None:
        trace.append(SampleState(x.copy(), s.T, idx))
    for t in range(s.T, 0, -1):
        x = reverse_step(model, x, t, mode, s, rng if noise else None, guidance=guidance,
                         labels=labels, clip=clip, counter=counter)
        if trace is not None:
            trace.append(SampleState(x.copy(), t - 1, idx))
    return x, idx


def sample_chain(model, prior: MixturePrior, s: NoiseSchedule, rng: np.random.Generator,
                 component: int | None = None, **kw):
    """Single-chain convenience wrapper returning ``(x0, component_index)``."""
    x, idx = sample_chains(model, prior, s, rng, 1, component, **kw)
    return x[0], int(idx[0])
