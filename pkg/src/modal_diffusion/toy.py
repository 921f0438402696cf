"""Four-mode toy experiment: plain DDPM vs mode-coupled priors vs guidance.

One DDPM model, one mode-coupled model per separation ``delta`` and one
label-conditional model (for classifier-free guidance) are trained on the same
data.  Each is sampled and scored with the same metrics; optional outputs are
one SVG scatter per panel plus ``summary.csv``/``summary.json``.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .baselines import GuidanceConfig, SoftClassifier, cfg_sample, cg_sample, ddpm_sample
from .datagen import LabeledDataset, four_mode_centers, gen_four_mode
from .diffusion import sample_chains
from .metrics import energy_distance, hard_classify, mode_accuracy, spurious_rate
from .nn import Denoiser, TrainConfig, ema_model, train_model
from .prior import (MixturePrior, PriorLayoutConfig, SeparationWarning, build_ring_prior,
                    check_separation, standard_prior)
from .schedule import build_schedule

log = logging.getLogger(__name__)


@dataclass
class ToyConfig:
    n_per_mode: int = 1000
    a: float = 2.0
    std: float = 0.3
    data_seed: int = 0
    reference_seed: int = 1
    T: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.3
    delta_small: float = 0.5
    delta_good: float = 4.0
    delta_large: float = 30.0
    prior_sigma: float = 1.0
    phase: float = math.pi / 4
    steps: int = 8000
    training: dict = field(default_factory=dict)
    use_ema: bool = True
    n_samples_per_mode: int = 1000
    cg_weights: tuple = (1.0, 10.0)
    cfg_weights: tuple = (1.0, 1.05)
    tau: float | None = None
    rho: float = 3.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ToyConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown toy options: {sorted(unknown)}")
        d = dict(d)
        for key in ("cg_weights", "cfg_weights"):
            if key in d:
                d[key] = tuple(float(w) for w in d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["cg_weights"] = list(self.cg_weights)
        d["cfg_weights"] = list(self.cfg_weights)
        return d

    def train_config(self, conditional: bool = False) -> TrainConfig:
        base = {"steps": self.steps, "seed": self.seed, **self.training,
                "conditional": conditional}
        return TrainConfig.from_dict(base)


@dataclass
class Panel:
    name: str
    method: str
    x: np.ndarray
    requested: np.ndarray      # -1 where nothing was requested
    delta: float = float("nan")
    weight: float = float("nan")


@dataclass
class ToyResult:
    config: ToyConfig
    data: LabeledDataset
    reference: LabeledDataset
    panels: list
    rows: list
    models: dict
    priors: dict
    train_seconds: dict = field(default_factory=dict)

    def row(self, name: str) -> dict:
        for r in self.rows:
            if r["panel"] == name:
                return r
        raise KeyError(name)

    def checks(self) -> dict:
        """Directional comparisons the experiment is meant to show."""
        good = self.row("modal_good")
        ddpm = self.row("ddpm")
        out = {
            "good_acc_per_mode_min": min(good[f"acc_mode{i}"] for i in range(4)),
            "good_spurious_below_ddpm": good["spurious_rate"] < ddpm["spurious_rate"],
            "large_ed_above_good": self.row("modal_large")["mean_ed"] > good["mean_ed"],
            "small_ed_above_good": self.row("modal_small")["mean_ed"] > good["mean_ed"],
        }
        cg = [self.row(f"cg_w{_wtag(w)}")["acc"] for w in self.config.cg_weights]
        cf = [self.row(f"cfg_w{_wtag(w)}")["acc"] for w in self.config.cfg_weights]
        out["cg_acc_non_decreasing"] = all(b >= a for a, b in zip(cg, cg[1:]))
        out["cfg_acc_non_decreasing"] = all(b >= a for a, b in zip(cf, cf[1:]))
        return out


def _wtag(w: float) -> str:
    return format(float(w), "g")


def toy_prior(cfg: ToyConfig, delta: float) -> MixturePrior:
    """Ring layout: four modes in two dimensions exceed the simplex limit k <= dim."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SeparationWarning)
        return build_ring_prior(PriorLayoutConfig(4, 2, delta),
                                sigmas=[cfg.prior_sigma] * 4, phase=cfg.phase)


def _score(panel: Panel, centers, sigmas, data_std, reference: LabeledDataset, rho) -> dict:
    k = len(centers)
    row = {"panel": panel.name, "method": panel.method, "delta": panel.delta,
           "weight": panel.weight, "n_samples": int(len(panel.x))}
    req = panel.requested
    if np.all(req < 0):
        acc, per_mode = float("nan"), [float("nan")] * k
        groups = hard_classify(panel.x, centers, sigmas)
    else:
        acc, per_mode, _ = mode_accuracy(panel.x, req, centers, sigmas)
        groups = req
    row["acc"] = acc
    for i in range(k):
        row[f"acc_mode{i}"] = per_mode[i]
    row["spurious_rate"] = spurious_rate(panel.x, centers, data_std, rho)
    eds = []
    for i in range(k):
        xi = panel.x[groups == i]
        eds.append(energy_distance(xi, reference.by_label(i)) if len(xi) else float("nan"))
        row[f"ed_mode{i}"] = eds[-1]
    finite = [e for e in eds if not math.isnan(e)]
    row["mean_ed"] = float(np.mean(finite)) if finite else float("nan")
    return row


def _sample_rng(seed: int, panel_idx: int, sub: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 10, panel_idx, sub])


def run_toy(cfg: ToyConfig, out_dir=None) -> ToyResult:
    data = gen_four_mode(cfg.n_per_mode, cfg.a, cfg.std, cfg.data_seed)
    reference = gen_four_mode(cfg.n_per_mode, cfg.a, cfg.std, cfg.reference_seed)
    s = build_schedule(cfg.T, cfg.beta_min, cfg.beta_max)
    centers = four_mode_centers(cfg.a)
    sigmas = np.full(4, cfg.std)
    n = cfg.n_samples_per_mode
    tau = cfg.tau if cfg.tau is not None else cfg.std ** 2

    train_seconds = {}

    def fit(tag, prior, conditional=False) -> Denoiser:
        tc = cfg.train_config(conditional)
        t0 = time.perf_counter()
        model, state, losses, _ = train_model(data, prior, s, tc)
        train_seconds[tag] = time.perf_counter() - t0
        log.info("trained %s model (k=%d): final loss %.4f", "conditional" if conditional
                 else "unconditional", prior.k, float(np.mean(losses[-100:])))
        return ema_model(model, state) if cfg.use_ema else model

    priors = {"ddpm": standard_prior(2)}
    for tag, d in (("small", cfg.delta_small), ("good", cfg.delta_good),
                   ("large", cfg.delta_large)):
        priors[tag] = toy_prior(cfg, d)
    models = {tag: fit(tag, p) for tag, p in priors.items()}
    models["conditional"] = fit("conditional", priors["ddpm"], conditional=True)

    panels = [Panel("data", "data", data.points, data.labels.copy())]
    x = ddpm_sample(models["ddpm"], s, _sample_rng(cfg.seed, 1, 0), 4 * n)
    panels.append(Panel("ddpm", "ddpm", x, np.full(4 * n, -1)))
    for j, tag in enumerate(("small", "good", "large")):
        prior = priors[tag]
        xs = [sample_chains(models[tag], prior, s, _sample_rng(cfg.seed, 2 + j, i), n,
                            component=i)[0] for i in range(4)]
        panels.append(Panel(f"modal_{tag}", "modal", np.concatenate(xs),
                            np.repeat(np.arange(4), n), delta=prior.delta))
    clf = SoftClassifier(centers, tau)
    for j, w in enumerate(cfg.cg_weights):
        xs = [cg_sample(models["ddpm"], clf, GuidanceConfig("cg", w, i), s,
                        _sample_rng(cfg.seed, 10 + j, i), n) for i in range(4)]
        panels.append(Panel(f"cg_w{_wtag(w)}", "cg", np.concatenate(xs),
                            np.repeat(np.arange(4), n), weight=w))
    for j, w in enumerate(cfg.cfg_weights):
        xs = [cfg_sample(models["conditional"], GuidanceConfig("cfg", w, i), s,
                         _sample_rng(cfg.seed, 20 + j, i), n) for i in range(4)]
        panels.append(Panel(f"cfg_w{_wtag(w)}", "cfg", np.concatenate(xs),
                            np.repeat(np.arange(4), n), weight=w))

    rows = [_score(p, centers, sigmas, cfg.std, reference, cfg.rho) for p in panels]
    for r, p in zip(rows, panels):
        if p.method == "modal":
            tag = p.name.split("_", 1)[1]
            r["separation_ok"] = check_separation(priors[tag],
                                                  PriorLayoutConfig(4, 2, p.delta)).ok
    result = ToyResult(cfg, data, reference, panels, rows, models, priors, train_seconds)
    if out_dir is not None:
        write_toy_outputs(result, out_dir)
    return result


SUMMARY_COLUMNS = ("panel", "method", "delta", "weight", "n_samples", "acc",
                   "acc_mode0", "acc_mode1", "acc_mode2", "acc_mode3", "spurious_rate",
                   "ed_mode0", "ed_mode1", "ed_mode2", "ed_mode3", "mean_ed")


def write_toy_outputs(result: ToyResult, out_dir) -> list:
    from .io import scatter_svg, write_json, write_rows_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    centers = four_mode_centers(result.config.a)
    for p in result.panels:
        path = out / f"panel_{p.name}.svg"
        colors = np.where(p.requested >= 0, p.requested,
                          hard_classify(p.x, centers, np.full(4, result.config.std)))
        title = p.name if math.isnan(p.delta) else f"{p.name} (delta={p.delta:g})"
        scatter_svg(path, p.x, colors, title=title, extent=4.5, centers=centers)
        written.append(path.name)
    write_rows_csv(out / "summary.csv", SUMMARY_COLUMNS,
                   [[r[c] for c in SUMMARY_COLUMNS] for r in result.rows])
    write_json(out / "summary.json", {"config": result.config.to_dict(),
                                      "rows": result.rows,
                                      "checks": result.checks(),
                                      "panels": written})
    return written
