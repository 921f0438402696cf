"""Plain DDPM sampling and the two post-hoc guidance baselines.

Both guidance rules are written in noise space for a standard ``N(0, I)``
prior:

* classifier guidance, ``eps_hat = eps - w * grad_{x_t} g(mu_theta(x_t))``
  with ``g`` the target log-probability of a soft classifier evaluated at the
  model's reverse mean.  Subtracting the gradient of the log-probability is the
  same as adding the gradient of the cost ``-g``; it moves the reverse mean
  uphill in ``g``.
* classifier-free guidance,
  ``eps_hat = eps(x_t) + w * (eps(x_t, L) - eps(x_t))``.

Clean-prediction models are mapped to noise estimates through the ``mu = 0,
sigma = 1`` marginal before guidance is applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffusion import (EvalCounter, ModeParams, eps_from_x0, reverse_coefficients,
                        reverse_mean_x0)
from .schedule import NoiseSchedule

GUIDANCE_KINDS = ("none", "cg", "cfg")


@dataclass(frozen=True)
class GuidanceConfig:
    kind: str = "none"
    weight: float = 0.0
    target_label: int = 0

    def __post_init__(self):
        if self.kind not in GUIDANCE_KINDS:
            raise ValueError(f"guidance kind must be one of {GUIDANCE_KINDS}")
        if not math.isfinite(self.weight):
            raise ValueError("guidance weight must be finite")


@dataclass(frozen=True)
class SoftClassifier:
    """softmax over ``-||x - c_i||^2 / tau``."""
    centers: np.ndarray
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("temperature must be > 0")

    @property
    def k(self) -> int:
        return len(self.centers)

    def log_probs(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        diff = x[:, None, :] - self.centers[None, :, :]
        logits = -np.einsum("ijk,ijk->ij", diff, diff) / self.tau
        m = logits.max(axis=1, keepdims=True)
        return logits - (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))


def classifier_logprob_grad(clf: SoftClassifier, x, label):
    """``log p(label | x)`` and its gradient in ``x`` (batched over rows).

    With ``p = softmax(-||x - c||^2 / tau)`` the gradient is
    ``(2 / tau) * (c_label - sum_j p_j c_j)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    label = np.broadcast_to(np.asarray(label, dtype=np.int64), (x.shape[0],))
    if label.min() < 0 or label.max() >= clf.k:
        raise IndexError(f"label outside [0, {clf.k})")
    lp = clf.log_probs(x)
    p = np.exp(lp)
    grad = (2.0 / clf.tau) * (clf.centers[label] - p @ clf.centers)
    return lp[np.arange(x.shape[0]), label], grad


# -- guidance hooks -----------------------------------------------------------

def cg_guidance(clf: SoftClassifier, weight: float, target):
    """Noise-space perturbation ``-w * J_mu(x_t)^T grad g(mu_theta(x_t))``.

    The vector-Jacobian product goes through the model (one input-gradient
    pass per step), matching the per-step backpropagation cost of classifier
    guidance.
    """
    def hook(*, model, x, t, mode, s, x0_hat, eps_hat, labels, counter):
        if x0_hat is not None:
            c_xt, c_x0, _ = reverse_coefficients(t, s)
            mean = reverse_mean_x0(x, x0_hat, t, mode, s)
        else:
            a = s.alphas[t]
            k = s.betas[t] / math.sqrt(s.one_minus_alpha_bars[t])
            mean = (x - mode.mu / s.eta_T - k * mode.sigma * eps_hat) / math.sqrt(a)
        _, g_mean = classifier_logprob_grad(clf, mean, target)
        _, vjp = model.input_vjp(x, t, g_mean, labels)
        if counter is not None:
            counter.classifier_grads += 1
            counter.model_vjps += 1
        if x0_hat is not None:
            grad_xt = c_xt * g_mean + c_x0 * vjp
        else:
            grad_xt = (g_mean - k * mode.sigma * vjp) / math.sqrt(a)
        d_eps = -weight * grad_xt
        if not np.all(np.isfinite(d_eps)):
            raise FloatingPointError(f"non-finite classifier gradient at step {t}")
        return d_eps
    return hook


def cfg_noise_estimate(eps_uncond, eps_cond, weight: float):
    return eps_uncond + weight * (eps_cond - eps_uncond)


def cfg_guidance(weight: float, target):
    """Perturbation ``w * (eps(x_t, L) - eps(x_t))``; the base pass is unconditional."""
    def hook(*, model, x, t, mode, s, x0_hat, eps_hat, labels, counter):
        cond = np.broadcast_to(np.asarray(target, dtype=np.int64), (np.shape(x)[0],))
        out_c = model.forward(x, t, cond)
        if counter is not None:
            counter.model_evals += 1
        if not np.all(np.isfinite(out_c)):
            raise FloatingPointError(f"non-finite conditional output at step {t}")
        if x0_hat is not None:
            e_u = eps_from_x0(x, x0_hat, t, mode, s)
            e_c = eps_from_x0(x, out_c, t, mode, s)
        else:
            e_u, e_c = eps_hat, out_c
        return weight * (e_c - e_u)
    return hook


# -- samplers -----------------------------------------------------------------

def ddpm_sample(model, s: NoiseSchedule, rng: np.random.Generator, n: int = 1, *,
                guidance=None, labels=None, clip: float | None = None,
                counter: EvalCounter | None = None) -> np.ndarray:
    """Ancestral DDPM sampling from ``N(0, I)`` with the standard posterior.

    Written against the unshifted formulas directly; it must agree bit for bit
    with the shifted sampler run on a single ``mu = 0, sigma = 1`` component.
    """
    dim = model.dim
    mode = ModeParams(np.zeros((n, dim)), np.ones((n, 1)))
    x = rng.standard_normal((n, dim))
    for t in range(s.T, 0, -1):
        out = model.forward(x, t, labels)
        if counter is not None:
            counter.model_evals += 1
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"non-finite model output at step {t}")
        a = s.alphas[t]
        b = s.betas[t]
        om_prev = s.one_minus_alpha_bars[t - 1]
        om = s.one_minus_alpha_bars[t]
        if model.parameterization == "clean":
            x0_hat = out
            if guidance is not None:
                d_eps = guidance(model=model, x=x, t=t, mode=mode, s=s, x0_hat=x0_hat,
                                 eps_hat=None, labels=labels, counter=counter)
                x0_hat = x0_hat - math.sqrt(om) / math.sqrt(s.alpha_bars[t]) * 1.0 * d_eps
            if clip is not None:
                x0_hat = np.clip(x0_hat, -clip, clip)
            mean = (math.sqrt(a) * om_prev / om) * x + (math.sqrt(s.alpha_bars[t - 1]) * b / om) * x0_hat
        else:
            eps_hat = out
            if guidance is not None:
                eps_hat = eps_hat + guidance(model=model, x=x, t=t, mode=mode, s=s, x0_hat=None,
                                             eps_hat=eps_hat, labels=labels, counter=counter)
            mean = (x - b / math.sqrt(om) * eps_hat) / math.sqrt(a)
        if counter is not None:
            counter.steps += 1
        if t == 1:
            x = mean
        else:
            var = om_prev / om * b
            x = mean + math.sqrt(var) * rng.standard_normal((n, dim))
    return x


def cg_sample(model, clf: SoftClassifier, guidance: GuidanceConfig, s: NoiseSchedule,
              rng: np.random.Generator, n: int = 1, **kw) -> np.ndarray:
    if guidance.kind != "cg":
        raise ValueError("cg_sample needs a guidance config of kind 'cg'")
    hook = cg_guidance(clf, guidance.weight, guidance.target_label)
    return ddpm_sample(model, s, rng, n, guidance=hook, **kw)


def cfg_sample(cond_model, guidance: GuidanceConfig, s: NoiseSchedule,
               rng: np.random.Generator, n: int = 1, **kw) -> np.ndarray:
    if guidance.kind != "cfg":
        raise ValueError("cfg_sample needs a guidance config of kind 'cfg'")
    if not cond_model.conditional:
        raise ValueError("classifier-free guidance needs a label-conditional model")
    hook = cfg_guidance(guidance.weight, guidance.target_label)
    return ddpm_sample(cond_model, s, rng, n, guidance=hook, labels=None, **kw)
