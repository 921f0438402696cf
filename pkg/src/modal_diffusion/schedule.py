"""Variance schedules for the shifted forward process.

Index convention: every per-step array has length ``T + 1`` with entry 0
reserved for the clean sample, so ``betas[t]`` is the variance added at step
``t`` for ``t = 1..T``.  ``betas[0]`` is 0, ``alpha_bars[0]`` is 1 and
``etas[0]`` is 0, which makes the final reverse step return the clean
prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TERMINAL_ALPHA_BAR = 1e-4
KINDS = ("linear",)


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_min: float
    beta_max: float
    kind: str = "linear"
    betas: np.ndarray = field(repr=False, compare=False, default=None)
    alphas: np.ndarray = field(repr=False, compare=False, default=None)
    alpha_bars: np.ndarray = field(repr=False, compare=False, default=None)
    one_minus_alpha_bars: np.ndarray = field(repr=False, compare=False, default=None)
    etas: np.ndarray = field(repr=False, compare=False, default=None)

    @property
    def eta_T(self) -> float:
        return float(self.etas[self.T])

    @property
    def terminal_valid(self) -> bool:
        return bool(self.alpha_bars[self.T] < TERMINAL_ALPHA_BAR)

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise IndexError(f"step {t} outside [1, {self.T}]")

    def to_config(self) -> dict:
        return {"T": self.T, "beta_min": self.beta_min,
                "beta_max": self.beta_max, "kind": self.kind}

    @classmethod
    def from_config(cls, cfg: dict) -> "NoiseSchedule":
        return build_schedule(int(cfg["T"]), float(cfg["beta_min"]),
                              float(cfg["beta_max"]), cfg.get("kind", "linear"))


def eta_recurrence(alphas: np.ndarray, eta0: float = 0.0) -> np.ndarray:
    """``etas[t] = 1 + sqrt(alphas[t]) * etas[t-1]`` with ``etas[0] = eta0``.

    ``alphas`` uses the padded layout (``alphas[0]`` ignored).
    """
    etas = np.empty(len(alphas), dtype=np.float64)
    etas[0] = eta0
    sqrt_alphas = np.sqrt(alphas)
    for t in range(1, len(alphas)):
        etas[t] = 1.0 + sqrt_alphas[t] * etas[t - 1]
    return etas


def schedule_from_betas(betas, *, beta_min=None, beta_max=None, kind="custom",
                        eta0: float = 0.0) -> NoiseSchedule:
    """Build a schedule from an explicit length-T sequence of betas."""
    b = np.asarray(betas, dtype=np.float64)
    if b.ndim != 1 or b.size == 0:
        raise ValueError("betas must be a non-empty 1-D sequence")
    if not np.all((b > 0.0) & (b < 1.0)):
        raise ValueError("every beta must lie in (0, 1)")
    T = b.size
    betas_p = np.concatenate(([0.0], b))
    alphas_p = 1.0 - betas_p
    alpha_bars = np.cumprod(alphas_p)
    # 1 - abar_t = beta_t + alpha_t (1 - abar_{t-1}): exact at t=1, no cancellation
    omab = np.empty(T + 1)
    omab[0] = 0.0
    for t in range(1, T + 1):
        omab[t] = betas_p[t] + alphas_p[t] * omab[t - 1]
    etas = eta_recurrence(alphas_p, eta0)
    for arr in (betas_p, alphas_p, alpha_bars, omab, etas):
        arr.setflags(write=False)
    return NoiseSchedule(
        T=T,
        beta_min=float(b.min()) if beta_min is None else beta_min,
        beta_max=float(b.max()) if beta_max is None else beta_max,
        kind=kind,
        betas=betas_p,
        alphas=alphas_p,
        alpha_bars=alpha_bars,
        one_minus_alpha_bars=omab,
        etas=etas,
    )


def build_schedule(T: int, beta_min: float, beta_max: float,
                   kind: str = "linear") -> NoiseSchedule:
    if kind not in KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")
    if int(T) != T or T < 1:
        raise ValueError("T must be a positive integer")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    betas = np.linspace(beta_min, beta_max, int(T), dtype=np.float64)
    return schedule_from_betas(betas, beta_min=float(beta_min),
                               beta_max=float(beta_max), kind=kind)


def eta_closed_form(schedule, t: int) -> float:
    """Direct evaluation of the nested-product sum defining eta_t.

    Used as an oracle against the recurrence.  The summand for ``m`` is the
    square root of ``prod(alphas[m+1..t])``; those products are the reversed
    cumulative products of ``alphas[2..t]``.  ``schedule`` may also be a
    padded alphas array (entry 0 ignored).
    """
    if isinstance(schedule, NoiseSchedule):
        schedule.check_step(t)
        alphas = schedule.alphas
    else:
        alphas = np.asarray(schedule, dtype=np.float64)
        if not 1 <= t < len(alphas):
            raise IndexError(f"step {t} outside [1, {len(alphas) - 1}]")
    if t == 1:
        return 1.0
    prods = np.cumprod(alphas[t:1:-1])
    return 1.0 + math.fsum(np.sqrt(prods))
