"""Gaussian-mixture priors whose components are tied to data mode labels."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

SOURCES = ("simplex", "ring", "empirical")


class SeparationWarning(UserWarning):
    """Confidence ellipsoids of two prior components overlap."""


@dataclass(frozen=True)
class PriorLayoutConfig:
    k: int
    dim: int
    delta: float
    confidence: float = 0.99

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")


@dataclass(frozen=True)
class Component:
    mean: np.ndarray
    sigma: float
    weight: float


@dataclass(frozen=True)
class SeparationReport:
    ok: bool
    radius: np.ndarray        # sigma_i * sqrt(chi2 quantile), per component
    min_distance: float
    slack: np.ndarray         # min_distance - radius, per component


@dataclass(frozen=True)
class MixturePrior:
    components: tuple
    source: str
    delta: float | None = None
    separation: SeparationReport | None = field(default=None, compare=False)
    degenerate: tuple = ()

    def __post_init__(self):
        if not self.components:
            raise ValueError("prior needs at least one component")
        if self.source not in SOURCES:
            raise ValueError(f"unknown prior source {self.source!r}")
        w = sum(c.weight for c in self.components)
        if abs(w - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w!r}, not 1")
        if any(c.sigma < 0 for c in self.components):
            raise ValueError("sigmas must be non-negative")

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return self.components[0].mean.shape[0]

    @property
    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([c.sigma for c in self.components])

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])

    def to_json(self) -> dict:
        return {
            "source": self.source,
            "delta": self.delta,
            "components": [
                {"mean": [float(v) for v in c.mean], "sigma": float(c.sigma),
                 "weight": float(c.weight)}
                for c in self.components
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MixturePrior":
        comps = tuple(
            Component(np.asarray(c["mean"], dtype=np.float64), float(c["sigma"]),
                      float(c["weight"]))
            for c in obj["components"]
        )
        return cls(comps, obj["source"], obj.get("delta"))


def standard_prior(dim: int) -> MixturePrior:
    """Single N(0, I) component: the unshifted DDPM prior."""
    return MixturePrior((Component(np.zeros(dim), 1.0, 1.0),), "empirical")


# -- layout -----------------------------------------------------------------

def simplex_means(cfg: PriorLayoutConfig, *, scale: str = "k-1") -> list:
    """Vertices of a regular (k-1)-simplex of circumradius delta.

    The vertices live in the first k coordinates of R^dim and sum to zero.
    ``scale`` selects the normalisation constant; only ``"k-1"`` yields norm
    delta and edge length ``delta * sqrt(2 + 2/(k-1))``.  ``"k+1"`` exists so
    the verification suite can demonstrate that it does not.
    """
    k, dim, delta = cfg.k, cfg.dim, float(cfg.delta)
    if k > dim:
        raise ValueError(f"simplex layout needs k <= dim (got k={k}, dim={dim})")
    if k == 1:
        return [np.zeros(dim)]
    if scale == "k-1":
        c = math.sqrt(k / (k - 1))
    elif scale == "k+1":
        c = math.sqrt(k / (k + 1))
    else:
        raise ValueError(f"unknown simplex scale {scale!r}")
    means = []
    for i in range(k):
        w = np.full(k, -1.0 / k)
        w[i] += 1.0
        mu = np.zeros(dim)
        mu[:k] = delta * c * w
        means.append(mu)
    return means


def ring_means(k: int, dim: int, delta: float, phase: float = 0.0) -> list:
    """k points evenly spaced on a circle of radius delta (first two coords)."""
    if dim < 2:
        raise ValueError("ring layout needs dim >= 2")
    if not delta > 0:
        raise ValueError("delta must be > 0")
    means = []
    for i in range(k):
        theta = phase + 2.0 * math.pi * i / k
        mu = np.zeros(dim)
        mu[0] = delta * math.cos(theta)
        mu[1] = delta * math.sin(theta)
        means.append(mu)
    return means


# -- chi-square quantile -----------------------------------------------------

def _gammainc_series(a: float, x: float) -> float:
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gammaincc_cf(a: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_lower_gamma(a: float, x: float) -> float:
    """P(a, x) = gamma(a, x) / Gamma(a)."""
    if a <= 0:
        raise ValueError("shape must be positive")
    if x <= 0:
        return 0.0
    if x < a + 1.0:
        return _gammainc_series(a, x)
    return 1.0 - _gammaincc_cf(a, x)


def chi_square_cdf(x: float, dof: int) -> float:
    return regularized_lower_gamma(0.5 * dof, 0.5 * x)


def chi_square_quantile(dof: int, c: float, *, tol: float = 1e-12,
                        max_iter: int = 400) -> float:
    """x with P(chi2_dof <= x) = c, by bisection on the regularized gamma."""
    if int(dof) != dof or dof < 1:
        raise ValueError("dof must be a positive integer")
    if not 0.0 <= c < 1.0:
        raise ValueError("c must lie in [0, 1)")
    if c == 0.0:
        return 0.0
    lo, hi = 0.0, max(1.0, float(dof))
    while chi_square_cdf(hi, dof) < c:
        lo, hi = hi, 2.0 * hi
        if hi > 1e12:
            raise ArithmeticError("chi-square quantile bracket diverged")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if chi_square_cdf(mid, dof) < c:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            return 0.5 * (lo + hi)
    raise ArithmeticError(f"chi-square quantile did not converge (dof={dof}, c={c})")


# -- separation --------------------------------------------------------------

def pairwise_distances(means: np.ndarray) -> np.ndarray:
    diff = means[:, None, :] - means[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def check_separation(prior: MixturePrior, cfg: PriorLayoutConfig) -> SeparationReport:
    """Do the c-level confidence balls of all components stay disjoint?

    Component i passes when ``sigma_i * sqrt(chi2_{dim,c}) <= min pairwise
    mean distance``.
    """
    if prior.k < 2:
        raise ValueError("separation needs at least two components")
    d = pairwise_distances(prior.means)
    min_dist = float(d[~np.eye(prior.k, dtype=bool)].min())
    radius = prior.sigmas * math.sqrt(chi_square_quantile(cfg.dim, cfg.confidence))
    slack = min_dist - radius
    return SeparationReport(bool(np.all(slack >= 0)), radius, min_dist, slack)


# -- construction ------------------------------------------------------------

def _finish(means, cfg, weights, sigmas, source) -> MixturePrior:
    k = len(means)
    if weights is None:
        weights = np.full(k, 1.0 / k)
    weights = np.asarray(weights, dtype=np.float64)
    if sigmas is None:
        sigmas = np.ones(k)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if weights.shape != (k,) or sigmas.shape != (k,):
        raise ValueError(f"weights and sigmas must have length k={k}")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise ValueError("weights must be a probability vector")
    if np.any(sigmas <= 0):
        raise ValueError("sigmas must be positive")
    comps = tuple(Component(m, float(s), float(w))
                  for m, s, w in zip(means, sigmas, weights))
    prior = MixturePrior(comps, source, float(cfg.delta))
    if k >= 2:
        report = check_separation(prior, cfg)
        if not report.ok:
            warnings.warn(
                f"prior components overlap at confidence {cfg.confidence}: "
                f"min distance {report.min_distance:.4g} < radius {report.radius.max():.4g}",
                SeparationWarning, stacklevel=3)
        prior = MixturePrior(comps, source, float(cfg.delta), report)
    return prior


def build_simplex_prior(cfg: PriorLayoutConfig, weights=None, sigmas=None) -> MixturePrior:
    return _finish(simplex_means(cfg), cfg, weights, sigmas, "simplex")


def build_ring_prior(cfg: PriorLayoutConfig, weights=None, sigmas=None,
                     phase: float = 0.0) -> MixturePrior:
    """Evenly spaced means on a circle; covers k > dim for 2-D data."""
    return _finish(ring_means(cfg.k, cfg.dim, cfg.delta, phase), cfg, weights,
                   sigmas, "ring")


def fit_empirical_prior(data) -> MixturePrior:
    """Per-label moment matching.

    sigma_i pools the per-dimension population variances of label i by
    averaging them, weight_i is the label frequency.
    """
    points, labels, k = data.points, data.labels, data.k
    comps, degenerate = [], []
    for i in range(k):
        x = points[labels == i]
        if x.shape[0] < 2:
            raise ValueError(f"label {i} has {x.shape[0]} points; need >= 2")
        sigma = math.sqrt(float(np.mean(x.var(axis=0))))
        if sigma == 0.0:
            degenerate.append(i)
        comps.append(Component(x.mean(axis=0), sigma, x.shape[0] / points.shape[0]))
    # frequencies can miss 1 by an ulp; fold the residue into the last weight
    w = np.array([c.weight for c in comps])
    w[-1] = 1.0 - math.fsum(w[:-1])
    comps = [Component(c.mean, c.sigma, float(wi)) for c, wi in zip(comps, w)]
    return MixturePrior(tuple(comps), "empirical", None, None, tuple(degenerate))


def sample_prior(prior: MixturePrior, rng: np.random.Generator,
                 component: int | None = None) -> tuple:
    """Draw ``(x_T, index)``; ``component=None`` samples the mixture."""
    if component is None:
        idx = int(rng.choice(prior.k, p=prior.weights))
    else:
        if not 0 <= component < prior.k:
            raise IndexError(f"component {component} outside [0, {prior.k})")
        idx = int(component)
    c = prior.components[idx]
    x = c.mean + c.sigma * rng.standard_normal(prior.dim)
    return x, idx


def sample_prior_batch(prior: MixturePrior, n: int, rng: np.random.Generator,
                       component: int | None = None) -> tuple:
    """Vectorised draw of n prior samples and their component indices.

    A one-component prior draws no index, so the generator stream matches a
    plain ``N(mu, sigma^2 I)`` draw.
    """
    if component is None and prior.k == 1:
        idx = np.zeros(n, dtype=np.int64)
    elif component is None:
        idx = rng.choice(prior.k, size=n, p=prior.weights)
    else:
        if not 0 <= component < prior.k:
            raise IndexError(f"component {component} outside [0, {prior.k})")
        idx = np.full(n, component, dtype=np.int64)
    z = rng.standard_normal((n, prior.dim))
    x = prior.means[idx] + prior.sigmas[idx, None] * z
    return x, idx
