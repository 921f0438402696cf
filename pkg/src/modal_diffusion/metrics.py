"""Controllability and fidelity measures for generated samples."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .diffusion import ModeParams, forward_marginal
from .schedule import NoiseSchedule


@dataclass
class EvalReport:
    acc: float
    acc_per_mode: list
    requested_per_mode: list
    spurious_rate: float
    per_mode_energy_distance: list
    n_samples: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def scaled_distances(x, centers, sigmas) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    centers = np.asarray(centers, dtype=np.float64)
    diff = x[:, None, :] - centers[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return d / np.asarray(sigmas, dtype=np.float64)[None, :]


def hard_classify(x, centers, sigmas) -> np.ndarray:
    """argmin_i ||x - c_i|| / sigma_i per row; ties go to the lowest index."""
    return np.argmin(scaled_distances(x, centers, sigmas), axis=1)


def mode_accuracy(samples, requested, centers, sigmas):
    """Overall and per-mode fraction of samples classified as their request.

    Modes that were never requested get ``nan`` in the per-mode list.
    """
    requested = np.asarray(requested, dtype=np.int64)
    if requested.size == 0:
        raise ValueError("no samples")
    hit = hard_classify(samples, centers, sigmas) == requested
    k = len(centers)
    per_mode, counts = [], []
    for i in range(k):
        m = requested == i
        counts.append(int(m.sum()))
        per_mode.append(float(hit[m].mean()) if m.any() else float("nan"))
    return float(hit.mean()), per_mode, counts


def spurious_rate(samples, centers, data_std: float, rho: float = 3.0) -> float:
    """Fraction of samples farther than ``rho * data_std`` from every center."""
    if not rho > 0:
        raise ValueError("rho must be > 0")
    d = scaled_distances(samples, centers, np.ones(len(centers)))
    return float(np.mean(d.min(axis=1) > rho * data_std))


def energy_distance(a, b, backend: str | None = None) -> float:
    """V-statistic ``2 E|A-B| - E|A-A'| - E|B-B'|`` over all pairs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both sample sets must be non-empty")
    na, nb = len(a), len(b)
    ab = kernels.cross_distance_sum(a, b, backend) / (na * nb)
    aa = kernels.self_distance_sum(a, backend) / (na * na)
    bb = kernels.self_distance_sum(b, backend) / (nb * nb)
    return max(2.0 * ab - aa - bb, 0.0)


def evaluate(samples, requested, centers, sigmas, data_std: float, reference=None,
             reference_labels=None, rho: float = 3.0, config: dict | None = None) -> EvalReport:
    """Bundle accuracy, spurious rate and per-mode energy distances.

    ``reference`` / ``reference_labels`` give held-out data per mode; energy
    distances are ``nan`` for modes without samples or without reference.
    """
    samples = np.asarray(samples, dtype=np.float64)
    requested = np.asarray(requested, dtype=np.int64)
    acc, per_mode, counts = mode_accuracy(samples, requested, centers, sigmas)
    ed = []
    for i in range(len(centers)):
        s_i = samples[requested == i]
        if reference is None or len(s_i) == 0:
            ed.append(float("nan"))
            continue
        r_i = np.asarray(reference)[np.asarray(reference_labels) == i]
        ed.append(energy_distance(s_i, r_i) if len(r_i) else float("nan"))
    return EvalReport(acc, per_mode, counts, spurious_rate(samples, centers, data_std, rho),
                      ed, int(len(samples)), dict(config or {}))


@dataclass
class TerminalCheck:
    label: int
    n: int
    max_mean_z: float          # worst |mean error| in standard errors
    max_var_rel_err: float
    passed: bool


def terminal_moment_check(dataset, prior, schedule: NoiseSchedule, n_chains: int,
                          rng: np.random.Generator, *, mean_tol_se: float = 4.0,
                          var_tol: float = 0.02) -> list[TerminalCheck]:
    """Simulate q(x_T | x0) per label and compare with N(mu_L, sigma_L^2 I).

    ``x0`` is drawn uniformly from the label's points.  Both tests compare with
    the prior alone, so the residual ``sqrt(abar_T) x0`` counts as error: with
    ``abar_T`` near 1e-4 and 1e5 chains it is already resolvable.
    """
    if not schedule.terminal_valid:
        raise ValueError("terminal moment check needs alpha_bar_T < 1e-4")
    out = []
    T = schedule.T
    for i in range(prior.k):
        pts = dataset.by_label(i) if dataset is not None else np.zeros((1, prior.dim))
        x0 = pts[rng.integers(0, len(pts), size=n_chains)]
        mode = ModeParams.of(prior, i)
        eps = rng.standard_normal(x0.shape)
        xT = forward_marginal(x0, T, mode, schedule, eps)
        mean_err = xT.mean(axis=0) - mode.mu
        var = xT.var(axis=0, ddof=1)
        target_var = mode.sigma ** 2
        se = np.sqrt(np.maximum(var, 1e-300) / n_chains)
        mz = float(np.max(np.abs(mean_err) / se))
        vr = float(np.max(np.abs(var - target_var)) / target_var) if target_var > 0 else math.inf
        out.append(TerminalCheck(i, n_chains, mz, vr, mz <= mean_tol_se and vr <= var_tol))
    return out
