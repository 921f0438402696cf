"""Deterministic synthetic labeled datasets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

KINDS = ("four_mode_2d", "ring_modes", "maze_lite")


@dataclass(frozen=True)
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray
    k: int
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[0] == 0:
            raise ValueError("points must be a non-empty (N, dim) array")
        if self.labels.shape != (self.points.shape[0],):
            raise ValueError("need one label per point")
        if self.labels.min() < 0 or self.labels.max() >= self.k:
            raise ValueError(f"labels must lie in [0, {self.k})")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points must be finite")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    def by_label(self, i: int) -> np.ndarray:
        return self.points[self.labels == i]

    def label_means(self) -> np.ndarray:
        return np.stack([self.by_label(i).mean(axis=0) for i in range(self.k)])

    def label_stds(self) -> np.ndarray:
        """Per-label isotropic spread: root of the mean per-coordinate variance."""
        return np.array([math.sqrt(float(np.mean(self.by_label(i).var(axis=0))))
                         for i in range(self.k)])


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), tag])


def four_mode_centers(a: float = 2.0) -> np.ndarray:
    """Quadrant centers in label order: (+,+), (-,+), (-,-), (+,-)."""
    return np.array([[a, a], [-a, a], [-a, -a], [a, -a]], dtype=np.float64)


def gen_four_mode(n_per_mode: int = 500, a: float = 2.0, std: float = 0.3,
                  seed: int = 0) -> LabeledDataset:
    if n_per_mode < 1:
        raise ValueError("n_per_mode must be >= 1")
    if std < 0:
        raise ValueError("std must be >= 0")
    centers = four_mode_centers(a)
    rng = _rng(seed, 0)
    labels = np.repeat(np.arange(4), n_per_mode)
    points = centers[labels] + std * rng.standard_normal((labels.size, 2))
    return LabeledDataset(points, labels, 4, {"kind": "four_mode_2d", "n_per_mode": n_per_mode,
                                              "a": a, "std": std, "seed": seed})


def ring_centers(k: int, radius: float, phase: float = 0.0) -> np.ndarray:
    th = phase + 2.0 * np.pi * np.arange(k) / k
    return radius * np.stack([np.cos(th), np.sin(th)], axis=1)


def gen_ring_modes(k: int = 8, radius: float = 4.0, std: float = 0.2,
                   n_per_mode: int = 500, seed: int = 0) -> LabeledDataset:
    if k < 2:
        raise ValueError("ring layout needs k >= 2")
    if n_per_mode < 1 or std < 0:
        raise ValueError("need n_per_mode >= 1 and std >= 0")
    centers = ring_centers(k, radius)
    rng = _rng(seed, 1)
    labels = np.repeat(np.arange(k), n_per_mode)
    points = centers[labels] + std * rng.standard_normal((labels.size, 2))
    return LabeledDataset(points, labels, k, {"kind": "ring_modes", "k": k, "radius": radius,
                                              "std": std, "n_per_mode": n_per_mode,
                                              "seed": seed})


# Hand-drawn corridors on a 10 x 10 board: start, waypoints..., goal.
MAZE_LAYOUTS = (
    ((1.0, 1.0), (1.0, 8.0), (8.0, 8.0), (8.0, 1.0)),               # U-turn
    ((1.0, 5.0), (4.0, 5.0), (4.0, 1.0), (7.0, 1.0), (7.0, 9.0), (9.0, 9.0)),  # zig-zag
    ((9.0, 1.0), (5.0, 3.0), (2.0, 6.0), (6.0, 9.0)),               # diagonal sweep
)


def maze_layout(j: int, seed: int) -> np.ndarray:
    """Waypoint polyline for layout ``j``; layouts past the table are procedural."""
    if j < len(MAZE_LAYOUTS):
        return np.array(MAZE_LAYOUTS[j], dtype=np.float64)
    rng = _rng(seed, 100 + j)
    n_pts = int(rng.integers(3, 6))
    return rng.uniform(0.5, 9.5, size=(n_pts, 2))


def interpolate_polyline(waypoints: np.ndarray, horizon: int) -> np.ndarray:
    """``horizon`` points spaced uniformly in arc length, endpoints included."""
    seg = np.linalg.norm(np.diff(waypoints, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.linspace(0.0, cum[-1], horizon)
    return np.stack([np.interp(s, cum, waypoints[:, 0]),
                     np.interp(s, cum, waypoints[:, 1])], axis=1)


def gen_maze_lite(n_layouts: int = 3, horizon: int = 48, n_per_layout: int = 200,
                  noise_std: float = 0.1, seed: int = 0) -> LabeledDataset:
    """Flattened 2-D trajectories, one mode per layout.

    Start and goal are pinned; interior positions get i.i.d. Gaussian
    perturbations.  Rows are ``(x_1, y_1, ..., x_H, y_H)``.
    """
    if horizon < 2 or n_layouts < 1 or n_per_layout < 1 or noise_std < 0:
        raise ValueError("need horizon >= 2, n_layouts >= 1, n_per_layout >= 1, noise_std >= 0")
    rng = _rng(seed, 2)
    rows, labels = [], []
    for j in range(n_layouts):
        base = interpolate_polyline(maze_layout(j, seed), horizon)
        noise = noise_std * rng.standard_normal((n_per_layout, horizon, 2))
        noise[:, 0] = 0.0
        noise[:, -1] = 0.0
        rows.append((base[None] + noise).reshape(n_per_layout, 2 * horizon))
        labels.append(np.full(n_per_layout, j))
    return LabeledDataset(np.concatenate(rows), np.concatenate(labels), n_layouts,
                          {"kind": "maze_lite", "n_layouts": n_layouts, "horizon": horizon,
                           "n_per_layout": n_per_layout, "noise_std": noise_std,
                           "seed": seed})


def generate(cfg: dict) -> LabeledDataset:
    """Dispatch on ``cfg["kind"]``; remaining keys are generator arguments."""
    cfg = dict(cfg)
    kind = cfg.pop("kind", "four_mode_2d")
    if kind == "four_mode_2d":
        return gen_four_mode(**cfg)
    if kind == "ring_modes":
        return gen_ring_modes(**cfg)
    if kind == "maze_lite":
        return gen_maze_lite(**cfg)
    raise ValueError(f"unknown generator kind {kind!r}; expected one of {KINDS}")
