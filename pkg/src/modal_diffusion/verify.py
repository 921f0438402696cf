"""Numerical oracles for every closed form in the package.

Each check returns a :class:`CheckResult` with the measured error and the
tolerance it was held to.  ``run_all`` runs the whole suite; ``inject``
swaps in a known-broken variant (``simplex_k_plus_1`` or ``eta_off_by_one``)
to demonstrate that the suite catches it.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import (ModeParams, eps_from_x0, forward_marginal, forward_step,
                        reverse_mean_eps, reverse_mean_x0, reverse_variance, sample_chains)
from .nn import Denoiser, loss_and_grads
from .prior import (Component, MixturePrior, PriorLayoutConfig, chi_square_quantile,
                    simplex_means, standard_prior)
from .schedule import build_schedule, eta_closed_form, schedule_from_betas

INJECTIONS = ("simplex_k_plus_1", "eta_off_by_one")


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag}  {self.name:<28s} measured={self.measured:.3e} "
                f"tol={self.tolerance:.1e} ({self.seconds:.2f}s)")

    def to_json(self) -> dict:
        return asdict(self)


def _timed(fn):
    def wrapper(*a, **kw):
        t0 = time.perf_counter()
        res = fn(*a, **kw)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _schedule(T, beta_min, beta_max, inject=None):
    s = build_schedule(T, beta_min, beta_max)
    if inject == "eta_off_by_one":
        return schedule_from_betas(s.betas[1:], beta_min=beta_min, beta_max=beta_max,
                                   kind="linear", eta0=1.0)
    return s


# -- schedule -----------------------------------------------------------------

@_timed
def check_eta_identity(Ts=(1, 10, 100, 1000), tol=1e-12, inject=None) -> CheckResult:
    """Recurrence etas[t] against the nested-product sum, every t of every T."""
    worst = 0.0
    for T in Ts:
        s = _schedule(T, 1e-4, 0.02, inject)
        for t in range(1, T + 1):
            ref = eta_closed_form(s, t)
            worst = max(worst, abs(s.etas[t] - ref) / abs(ref))
    return CheckResult("eta_identity", worst <= tol, worst, tol, detail={"T": list(Ts)})


@_timed
def check_reverse_t1_identity(inject=None) -> CheckResult:
    """At t=1 the reverse mean is the clean prediction and the variance is 0."""
    s = _schedule(50, 1e-4, 0.35, inject)
    rng = np.random.default_rng(11)
    worst = 0.0
    for mu, sigma in ((0.0, 1.0), (3.0, 2.0), (-5.0, 0.5)):
        mode = ModeParams(np.full(3, mu), sigma)
        x_t = rng.standard_normal(3) * 2
        x0_hat = rng.standard_normal(3)
        m = reverse_mean_x0(x_t, x0_hat, 1, mode, s)
        worst = max(worst, float(np.max(np.abs(m - x0_hat))), reverse_variance(1, mode, s))
    return CheckResult("reverse_t1_identity", worst == 0.0, worst, 0.0)


# -- forward process ------------------------------------------------------------

@_timed
def check_forward_marginal_mc(n_chains=200_000, T=50, steps=(1, 10, 25, 50),
                              modes=((0.0, 1.0), (3.0, 2.0), (-5.0, 0.5)), x0=1.5,
                              mean_tol_se=4.0, var_tol=0.02, seed=0, inject=None) -> CheckResult:
    """Iterate the one-step forward kernel and compare moments with the marginal."""
    s = _schedule(T, 1e-4, 0.35, inject)
    rng = np.random.default_rng(seed)
    worst_z = worst_v = 0.0
    rows = []
    for mu, sigma in modes:
        mode = ModeParams(mu, sigma)
        x = np.full(n_chains, x0)
        for t in range(1, T + 1):
            x = forward_step(x, t, mode, s, rng.standard_normal(n_chains))
            if t in steps:
                mean_th = math.sqrt(s.alpha_bars[t]) * x0 + s.etas[t] / s.eta_T * mu
                var_th = (1.0 - s.alpha_bars[t]) * sigma ** 2
                z = abs(x.mean() - mean_th) / math.sqrt(var_th / n_chains)
                v = abs(x.var(ddof=1) - var_th) / var_th
                worst_z, worst_v = max(worst_z, z), max(worst_v, v)
                rows.append({"mu": mu, "sigma": sigma, "t": t, "mean_z": z, "var_rel": v})
    ok = worst_z <= mean_tol_se and worst_v <= var_tol
    return CheckResult("forward_marginal_mc", ok, worst_z, mean_tol_se,
                       detail={"max_var_rel_err": worst_v, "var_tol": var_tol, "rows": rows})


@_timed
def check_terminal_coupling(n_chains=100_000, T=1000, beta_max=0.04, seed=0,
                            x0_values=(0.0, 10.0), mean_tol_se=4.0, var_tol=0.02,
                            method="chain") -> CheckResult:
    """Test x_T ~ N(mu_L, sigma_L^2 I) from fixed x0 for every label.

    ``method="chain"`` iterates all T one-step kernels; ``"marginal"`` draws
    x_T from the closed-form marginal in one shot.
    """
    s = build_schedule(T, 1e-4, beta_max)
    if not s.terminal_valid:
        raise ValueError("terminal coupling needs a terminal-valid schedule")
    prior = MixturePrior(
        tuple(Component(m, sg, 1 / 3) for m, sg in
              zip(simplex_means(PriorLayoutConfig(3, 3, 2.0)), (1.0, 0.5, 2.0))),
        "simplex", 2.0)
    rng = np.random.default_rng(seed)
    worst_z = worst_v = 0.0
    rows = []
    for label in range(prior.k):
        mode = ModeParams.of(prior, label)
        for x0v in x0_values:
            x = np.full((n_chains, prior.dim), x0v)
            if method == "chain":
                for t in range(1, T + 1):
                    x = forward_step(x, t, mode, s, rng.standard_normal(x.shape))
            else:
                x = forward_marginal(x, T, mode, s, rng.standard_normal(x.shape))
            se = mode.sigma / math.sqrt(n_chains)
            z = float(np.max(np.abs(x.mean(axis=0) - mode.mu)) / se)
            v = float(np.max(np.abs(x.var(axis=0, ddof=1) - mode.sigma ** 2)) / mode.sigma ** 2)
            worst_z, worst_v = max(worst_z, z), max(worst_v, v)
            rows.append({"label": label, "x0": x0v, "mean_z": z, "var_rel": v})
    ok = worst_z <= mean_tol_se and worst_v <= var_tol
    return CheckResult("terminal_coupling", ok, worst_z, mean_tol_se,
                       detail={"alpha_bar_T": float(s.alpha_bars[T]), "method": method,
                               "n_chains": n_chains, "max_var_rel_err": worst_v,
                               "var_tol": var_tol, "rows": rows})


# -- reverse process --------------------------------------------------------------

def _log_normal(x, mean, var):
    return -0.5 * (x - mean) ** 2 / var - 0.5 * math.log(2 * math.pi * var)


def bayes_posterior_on_grid(x0, x_t, t, mode: ModeParams, s, grid):
    """Discretised q(x_t | x_{t-1}) q(x_{t-1} | x0) / q(x_t | x0) on a 1-D grid.

    Returns ``(mass, mean, var)``; ``mass`` is the Riemann sum of the
    unnormalised ratio and equals 1 when the marginal is right.
    """
    h = grid[1] - grid[0]
    mu, sigma = mode.mu, mode.sigma
    log_fwd = _log_normal(x_t, math.sqrt(s.alphas[t]) * grid + mu / s.eta_T,
                          (1.0 - s.alphas[t]) * sigma ** 2)
    log_prev = _log_normal(grid, math.sqrt(s.alpha_bars[t - 1]) * x0 + s.etas[t - 1] / s.eta_T * mu,
                           (1.0 - s.alpha_bars[t - 1]) * sigma ** 2)
    log_marg = _log_normal(x_t, math.sqrt(s.alpha_bars[t]) * x0 + s.etas[t] / s.eta_T * mu,
                           (1.0 - s.alpha_bars[t]) * sigma ** 2)
    w = np.exp(log_fwd + log_prev - log_marg)
    mass = math.fsum(w) * h
    p = w / math.fsum(w)
    mean = math.fsum(p * grid)
    var = math.fsum(p * (grid - mean) ** 2)
    return mass, mean, var


@_timed
def check_bayes_oracle(tol=1e-6, T=20, inject=None) -> CheckResult:
    """Grid posterior vs closed-form reverse mean/variance at t in {2, T/2, T}."""
    s = _schedule(T, 0.05, 0.4, inject)
    grid = np.linspace(-10.0, 10.0, 2001)
    worst = 0.0
    rows = []
    for x0 in (-1.0, 0.0, 1.5):
        for mu, sigma in ((0.0, 1.0), (2.0, 1.5), (-3.0, 0.5)):
            mode = ModeParams(mu, sigma)
            for t in (2, T // 2, T):
                m_th = math.sqrt(s.alpha_bars[t]) * x0 + s.etas[t] / s.eta_T * mu
                x_t = m_th + 0.5 * math.sqrt(1.0 - s.alpha_bars[t]) * sigma
                mass, mean, var = bayes_posterior_on_grid(x0, x_t, t, mode, s, grid)
                m_cf = float(reverse_mean_x0(x_t, x0, t, mode, s))
                v_cf = float(reverse_variance(t, mode, s))
                err = max(abs(mean - m_cf), abs(var - v_cf), abs(mass - 1.0))
                worst = max(worst, err)
                rows.append({"x0": x0, "x_t": x_t, "mu": mu, "sigma": sigma, "t": t,
                             "mean_err": abs(mean - m_cf), "var_err": abs(var - v_cf),
                             "mass_err": abs(mass - 1.0)})
    return CheckResult("bayes_oracle", worst <= tol, worst, tol,
                       detail={"combinations": len(rows) // 3, "rows": rows})


@_timed
def check_parameterization_equivalence(n=1000, tol=1e-10, seed=3, inject=None) -> CheckResult:
    """Clean- and noise-parameterised reverse means agree on consistent inputs."""
    s = _schedule(100, 1e-4, 0.3, inject)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        dim = int(rng.integers(1, 6))
        t = int(rng.integers(1, s.T + 1))
        mode = ModeParams(rng.uniform(-5, 5, dim), float(rng.uniform(0.2, 3.0)))
        x0_hat = rng.uniform(-3, 3, dim)
        x_t = forward_marginal(x0_hat, t, mode, s, rng.standard_normal(dim)) + rng.normal(0, 0.1, dim)
        eps_hat = eps_from_x0(x_t, x0_hat, t, mode, s)
        a = reverse_mean_x0(x_t, x0_hat, t, mode, s)
        b = reverse_mean_eps(x_t, eps_hat, t, mode, s)
        worst = max(worst, float(np.max(np.abs(a - b))))
    return CheckResult("parameterization_equiv", worst <= tol, worst, tol)


@_timed
def check_ddpm_reduction(tol=1e-12, seed=5) -> CheckResult:
    """mu=0, sigma=1 reproduces the textbook DDPM formulas and sampler."""
    from .baselines import ddpm_sample

    s = build_schedule(100, 1e-4, 0.3)
    rng = np.random.default_rng(seed)
    mode = ModeParams(np.zeros(4), 1.0)
    worst = 0.0
    for t in range(1, s.T + 1):
        ab, ab_prev, a, b = s.alpha_bars[t], s.alpha_bars[t - 1], s.alphas[t], s.betas[t]
        x0, x_t, eps = rng.standard_normal((3, 4))
        std_marg = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps
        std_mean_x0 = (math.sqrt(a) * (1 - ab_prev) / (1 - ab) * x_t
                       + math.sqrt(ab_prev) * b / (1 - ab) * x0)
        std_mean_eps = (x_t - (1 - a) / math.sqrt(1 - ab) * eps) / math.sqrt(a)
        std_var = (1 - ab_prev) / (1 - ab) * b
        worst = max(worst,
                    float(np.max(np.abs(forward_marginal(x0, t, mode, s, eps) - std_marg))),
                    float(np.max(np.abs(reverse_mean_x0(x_t, x0, t, mode, s) - std_mean_x0))),
                    float(np.max(np.abs(reverse_mean_eps(x_t, eps, t, mode, s) - std_mean_eps))),
                    abs(reverse_variance(t, mode, s) - std_var))
    model = Denoiser(2, (16, 16), 8, rng=np.random.default_rng(seed))
    small = build_schedule(20, 1e-3, 0.3)
    a = ddpm_sample(model, small, np.random.default_rng(99), 64)
    b, _ = sample_chains(model, standard_prior(2), small, np.random.default_rng(99), 64)
    bit_exact = bool(np.array_equal(a, b))
    return CheckResult("ddpm_reduction", worst <= tol and bit_exact, worst, tol,
                       detail={"sampler_bit_exact": bit_exact})


# -- prior geometry -----------------------------------------------------------------

@_timed
def check_simplex_geometry(tol=1e-12, inject=None) -> CheckResult:
    """Norm delta, edge delta*sqrt(2 + 2/(k-1)), centroid 0 for k in 2..8."""
    scale = "k+1" if inject == "simplex_k_plus_1" else "k-1"
    worst = 0.0
    for k in range(2, 9):
        for dim in (k, k + 3, 160):
            for delta in (0.5, 1.0, 2.0, 4.0, 30.0):
                mus = np.stack(simplex_means(PriorLayoutConfig(k, dim, delta), scale=scale))
                norms = np.linalg.norm(mus, axis=1)
                d = np.linalg.norm(mus[:, None] - mus[None], axis=2)[~np.eye(k, dtype=bool)]
                edge = delta * math.sqrt(2 + 2 / (k - 1))
                worst = max(worst, float(np.max(np.abs(norms - delta))),
                            float(np.max(np.abs(d - edge))),
                            float(np.max(np.abs(mus.mean(axis=0)))))
    return CheckResult("simplex_geometry", worst <= tol, worst, tol,
                       detail={"scale": scale})


def chi_square_cdf_quadrature(x: float, dof: int, panels: int = 20000) -> float:
    """P(chi2_dof <= x) by composite Simpson after substituting x = u^2.

    The substitution removes the dof=1 singularity at the origin; the
    integrand ``2 u^(dof-1) exp(-u^2/2) / (2^(dof/2) Gamma(dof/2))`` is smooth.
    """
    ub = math.sqrt(x)
    u = np.linspace(0.0, ub, 2 * panels + 1)
    log_norm = (dof / 2) * math.log(2.0) + math.lgamma(dof / 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_f = math.log(2.0) + (dof - 1) * np.log(u) - u * u / 2 - log_norm
    f = np.exp(log_f)
    if dof == 1:
        f[0] = math.exp(math.log(2.0) - log_norm)
    h = ub / (2 * panels)
    return float(h / 3 * (f[0] + f[-1] + 4 * f[1:-1:2].sum() + 2 * f[2:-1:2].sum()))


def chi_square_quantile_quadrature(dof: int, c: float) -> float:
    lo, hi = 0.0, float(dof) + 10.0 * math.sqrt(2.0 * dof) + 20.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if chi_square_cdf_quadrature(mid, dof) < c:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@_timed
def check_chi_square(tol_closed=1e-9, tol_quad=1e-3) -> CheckResult:
    """dof=2 against -2 ln(1-c); dof 1, 5, 160 against a quadrature oracle."""
    worst_closed = max(abs(chi_square_quantile(2, c) + 2 * math.log(1 - c))
                       for c in (0.5, 0.9, 0.99))
    worst_quad = 0.0
    rows = []
    for dof in (1, 5, 160):
        for c in (0.5, 0.95, 0.99):
            q = chi_square_quantile(dof, c)
            ref = chi_square_quantile_quadrature(dof, c)
            worst_quad = max(worst_quad, abs(q - ref))
            rows.append({"dof": dof, "c": c, "quantile": q, "oracle": ref})
    ok = worst_closed <= tol_closed and worst_quad <= tol_quad
    return CheckResult("chi_square_quantile", ok, worst_closed, tol_closed,
                       detail={"max_quadrature_err": worst_quad, "quadrature_tol": tol_quad,
                               "rows": rows})


# -- gradients -----------------------------------------------------------------------

def finite_difference_grads(model, batch, labels=None, rel_step=1e-6):
    """Central differences of the training loss for every parameter entry."""
    out = {}
    for name, p in model.params.items():
        g = np.zeros_like(p)
        flat, gf = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = rel_step * max(1.0, abs(orig))
            flat[i] = orig + h
            lp = loss_and_grads(model, batch, labels)[0]
            flat[i] = orig - h
            lm = loss_and_grads(model, batch, labels)[0]
            flat[i] = orig
            gf[i] = (lp - lm) / (2 * h)
        out[name] = g
    return out


def gradient_relative_error(analytic: dict, numeric: dict, floor: float = 1e-6) -> float:
    worst = 0.0
    for k in analytic:
        a, n = analytic[k], numeric[k]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


@_timed
def check_gradients(n_instances=5, tol=1e-4, seed=7) -> CheckResult:
    """Backprop against central finite differences on random small models."""
    from .diffusion import make_training_pairs

    rng = np.random.default_rng(seed)
    worst = 0.0
    for inst in range(n_instances):
        dim = int(rng.integers(1, 4))
        k = 3
        conditional = inst % 2 == 1
        param = "noise" if inst == 4 else "clean"
        model = Denoiser(dim, (7, 5), 4, k if conditional else None, param, rng)
        if conditional:
            model.params["label_emb"][:k] = rng.standard_normal((k, 7)) * 0.5
        for name in model.params:
            if name.startswith("b"):
                model.params[name] = rng.standard_normal(model.params[name].shape) * 0.3
        prior = MixturePrior(tuple(Component(rng.standard_normal(dim) * 2, 1.0, 1 / 3)
                                   for _ in range(k)), "empirical")
        s = build_schedule(10, 1e-3, 0.3)
        x0 = rng.standard_normal((6, dim))
        lab = rng.integers(0, k, 6)
        batch = make_training_pairs(x0, lab, prior, s, rng)
        cond = np.where(rng.random(6) < 0.3, k, lab) if conditional else None
        _, grads = loss_and_grads(model, batch, cond)
        num = finite_difference_grads(model, batch, cond)
        if conditional:
            # the null-label row is a fixed zero, never trained
            grads["label_emb"] = grads["label_emb"][:k]
            num["label_emb"] = num["label_emb"][:k]
        worst = max(worst, gradient_relative_error(grads, num))
    return CheckResult("gradients", worst < tol, worst, tol,
                       detail={"instances": n_instances})


def run_all(inject: str | None = None, fast: bool = False) -> list[CheckResult]:
    """Run the oracle suite; ``fast`` draws x_T from the marginal instead of chains."""
    if inject is not None and inject not in INJECTIONS:
        raise ValueError(f"unknown injection {inject!r}; expected one of {INJECTIONS}")
    return [
        check_eta_identity(inject=inject),
        check_reverse_t1_identity(inject=inject),
        check_forward_marginal_mc(inject=inject),
        check_terminal_coupling(n_chains=200_000 if fast else 100_000,
                                method="marginal" if fast else "chain"),
        check_bayes_oracle(inject=inject),
        check_parameterization_equivalence(inject=inject),
        check_ddpm_reduction(),
        check_simplex_geometry(inject=inject),
        check_chi_square(),
        check_gradients(),
    ]
