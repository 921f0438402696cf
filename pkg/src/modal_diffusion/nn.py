"""Feed-forward denoiser with hand-written reverse-mode gradients.

The network maps ``[x_t, time_features(t)]`` through SiLU hidden layers to a
vector of the data dimension.  Conditional models add a learned per-label
vector to the first hidden pre-activation; the extra "null" row (index
``n_labels``) is pinned at zero, so a conditional model queried with the null
label computes exactly what the same weights compute without labels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import TrainingPair, make_training_pairs
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

PARAMETERIZATIONS = ("clean", "noise")


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss or activation."""


def time_features(t, n_features: int, max_period: float = 1000.0) -> np.ndarray:
    """Sinusoidal features of the integer step on a geometric frequency ladder.

    The fastest frequency is 1 rad/step, which already separates every pair
    of integer steps.
    """
    if n_features % 2:
        raise ValueError("time feature count must be even")
    half = n_features // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    args = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def _silu(z):
    s = 0.5 * (1.0 + np.tanh(0.5 * z))   # logistic without exp overflow
    return z * s, s


class Denoiser:
    def __init__(self, dim: int, hidden=(128, 128, 128), time_dim: int = 32,
                 n_labels: int | None = None, parameterization: str = "clean",
                 rng: np.random.Generator | None = None, max_period: float = 1000.0):
        if parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}")
        if not hidden:
            raise ValueError("need at least one hidden layer")
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.time_dim = int(time_dim)
        self.n_labels = None if n_labels is None else int(n_labels)
        self.parameterization = parameterization
        self.max_period = float(max_period)
        rng = np.random.default_rng(0) if rng is None else rng

        widths = (self.dim + self.time_dim,) + self.hidden + (self.dim,)
        self.params: dict[str, np.ndarray] = {}
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            scale = math.sqrt(2.0 / (n_in + n_out))
            self.params[f"W{i}"] = rng.standard_normal((n_in, n_out)) * scale
            self.params[f"b{i}"] = np.zeros(n_out)
        if self.n_labels is not None:
            emb = rng.standard_normal((self.n_labels + 1, self.hidden[0])) * 0.1
            emb[self.n_labels] = 0.0
            self.params["label_emb"] = emb
        self.n_layers = len(widths) - 1

    @property
    def conditional(self) -> bool:
        return self.n_labels is not None

    @property
    def null_label(self) -> int:
        if self.n_labels is None:
            raise AttributeError("unconditional model has no null label")
        return self.n_labels

    def param_names(self) -> list[str]:
        return list(self.params)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "Denoiser":
        other = object.__new__(Denoiser)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    # -- forward / backward ---------------------------------------------------

    def _inputs(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected input dimension {self.dim}, got {x.shape[-1]}")
        t = np.broadcast_to(np.asarray(t), x.shape[:1])
        return x, np.concatenate([x, time_features(t, self.time_dim, self.max_period)], axis=1)

    def _label_rows(self, labels, n):
        if labels is None:
            return None
        if not self.conditional:
            raise ValueError("labels given to an unconditional model")
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,))
        if labels.min() < 0 or labels.max() > self.n_labels:
            raise IndexError("label outside [0, n_labels]")
        return labels

    def forward(self, x, t, labels=None, *, cache: bool = False):
        """Prediction for a batch; ``labels=None`` on a conditional model means null."""
        x, h = self._inputs(x, t)
        labels = self._label_rows(labels, x.shape[0])
        p = self.params
        acts, gates = [h], []
        for i in range(self.n_layers):
            z = h @ p[f"W{i}"] + p[f"b{i}"]
            if i == 0 and labels is not None:
                z = z + p["label_emb"][labels]
            if i == self.n_layers - 1:
                h = z
            else:
                h, s = _silu(z)
                gates.append((z, s))
                acts.append(h)
        if cache:
            return h, (acts, gates, labels)
        return h

    __call__ = forward

    def backward(self, cache, grad_out: np.ndarray, *, wrt_input: bool = False):
        """Reverse-mode pass: gradients of ``sum(grad_out * output)``.

        Returns ``(grads, grad_x)``; ``grad_x`` is the gradient with respect to
        the data part of the input (``None`` unless ``wrt_input``).
        """
        acts, gates, labels = cache
        p = self.params
        grads = {}
        g = grad_out
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                z, s = gates[i]
                g = g * (s * (1.0 + z * (1.0 - s)))
            grads[f"W{i}"] = acts[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            if i == 0 and self.conditional:
                ge = np.zeros_like(p["label_emb"])
                if labels is not None:
                    np.add.at(ge, labels, g)
                ge[self.n_labels] = 0.0
                grads["label_emb"] = ge
            if i > 0 or wrt_input:
                g = g @ p[f"W{i}"].T
        grad_x = g[:, : self.dim] if wrt_input else None
        return grads, grad_x

    def input_vjp(self, x, t, v, labels=None):
        """``(d model(x) / d x)^T v`` per batch row, plus the prediction."""
        out, cache = self.forward(x, t, labels, cache=True)
        _, gx = self.backward(cache, np.asarray(v, dtype=np.float64), wrt_input=True)
        return out, gx

    # -- flat (de)serialisation ----------------------------------------------

    def config(self) -> dict:
        return {"dim": self.dim, "hidden": list(self.hidden), "time_dim": self.time_dim,
                "n_labels": self.n_labels, "parameterization": self.parameterization,
                "max_period": self.max_period}

    def get_flat(self) -> dict[str, list]:
        return {k: v.ravel().tolist() for k, v in self.params.items()}

    @classmethod
    def from_flat(cls, config: dict, flat: dict) -> "Denoiser":
        m = cls(config["dim"], config["hidden"], config["time_dim"], config["n_labels"],
                config["parameterization"], max_period=config.get("max_period", 1000.0))
        for k, v in m.params.items():
            arr = np.asarray(flat[k], dtype=np.float64)
            if arr.size != v.size:
                raise ValueError(f"parameter {k}: expected {v.size} values, got {arr.size}")
            m.params[k] = arr.reshape(v.shape)
        return m


# -- loss ---------------------------------------------------------------------

def _targets(model: Denoiser, batch: TrainingPair) -> np.ndarray:
    return batch.x0 if model.parameterization == "clean" else batch.eps


def training_loss(model: Denoiser, batch: TrainingPair, labels=None) -> float:
    """Mean over the batch of the per-pair squared-error sum."""
    pred = model.forward(batch.x_t, batch.t, labels)
    r = pred - _targets(model, batch)
    per_pair = np.einsum("ij,ij->i", r, r)
    loss = math.fsum(per_pair) / per_pair.shape[0]
    if not math.isfinite(loss):
        raise DivergenceError("non-finite loss")
    return loss


def loss_and_grads(model: Denoiser, batch: TrainingPair, labels=None):
    pred, cache = model.forward(batch.x_t, batch.t, labels, cache=True)
    r = pred - _targets(model, batch)
    n = r.shape[0]
    loss = float(np.einsum("ij,ij->", r, r)) / n
    if not math.isfinite(loss):
        raise DivergenceError("non-finite loss")
    grads, _ = model.backward(cache, (2.0 / n) * r)
    return loss, grads


def backward(model: Denoiser, batch: TrainingPair, labels=None) -> dict:
    return loss_and_grads(model, batch, labels)[1]


# -- optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    ema: dict = field(default_factory=dict)   # exponential moving average of weights

    def to_json(self) -> dict:
        def flat(d):
            return {k: a.ravel().tolist() for k, a in d.items()}
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "step": self.step, "m": flat(self.m), "v": flat(self.v), "ema": flat(self.ema)}

    @classmethod
    def from_json(cls, obj: dict, model: Denoiser) -> "AdamState":
        shapes = {k: p.shape for k, p in model.params.items()}

        def unflat(d):
            return {k: np.asarray(a, dtype=np.float64).reshape(shapes[k]) for k, a in d.items()}
        return cls(obj["lr"], obj["beta1"], obj["beta2"], obj["eps"], obj["step"],
                   unflat(obj["m"]), unflat(obj["v"]), unflat(obj.get("ema", {})))


def optimizer_step(model: Denoiser, grads: dict, state: AdamState, lr: float | None = None):
    """Bias-corrected Adam update, in place on ``model`` and ``state``."""
    lr = state.lr if lr is None else lr
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        p = model.params[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return model, state


# -- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 8000
    batch: int = 256
    lr: float = 2e-3
    lr_final: float = 1e-4
    conditional: bool = False
    label_dropout: float = 0.1
    hidden: tuple = (128, 128, 128)
    time_dim: int = 32
    parameterization: str = "clean"
    ema: float = 0.999
    seed: int = 0
    log_every: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d


def update_ema(model: Denoiser, state: AdamState, decay: float) -> None:
    if not state.ema:
        state.ema = {k: p.copy() for k, p in model.params.items()}
        return
    for k, p in model.params.items():
        e = state.ema[k]
        e *= decay
        e += (1.0 - decay) * p


def ema_model(model: Denoiser, state: AdamState | None) -> Denoiser:
    """Copy of ``model`` carrying the averaged weights (or the raw ones)."""
    out = model.copy()
    if state is not None and state.ema:
        out.params = {k: v.copy() for k, v in state.ema.items()}
    return out


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Cosine decay from ``lr`` to ``lr_final`` over ``steps``."""
    if cfg.steps <= 1:
        return cfg.lr
    frac = min(step / (cfg.steps - 1), 1.0)
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + math.cos(math.pi * frac))


def init_model(data, cfg: TrainConfig, schedule: NoiseSchedule) -> Denoiser:
    rng = np.random.default_rng([cfg.seed, 1])
    return Denoiser(data.dim, cfg.hidden, cfg.time_dim,
                    data.k if cfg.conditional else None, cfg.parameterization, rng,
                    max_period=float(schedule.T))


def train_model(data, prior, schedule: NoiseSchedule, cfg: TrainConfig,
                model: Denoiser | None = None, state: AdamState | None = None,
                rng: np.random.Generator | None = None, until: int | None = None):
    """Fit the denoiser on noisy pairs built from ``prior``.

    ``cfg.steps`` is the total step budget (it also shapes the learning-rate
    decay); ``until`` stops early at that step count.  A run resumed from
    ``(model, state, rng)`` continues at ``state.step`` and reproduces the
    uninterrupted run exactly.  Returns ``(model, state, losses, rng)`` where
    ``losses`` covers only the steps taken in this call.
    """
    if data.k != prior.k and prior.k != 1:
        raise ValueError(f"dataset has {data.k} labels but prior has {prior.k} components")
    if not 0.0 <= cfg.label_dropout <= 1.0:
        raise ValueError("label_dropout must lie in [0, 1]")
    model = init_model(data, cfg, schedule) if model is None else model
    state = AdamState(lr=cfg.lr) if state is None else state
    rng = np.random.default_rng([cfg.seed, 2]) if rng is None else rng
    n = data.points.shape[0]
    losses = []
    stop = cfg.steps if until is None else min(until, cfg.steps)
    while state.step < stop:
        idx = rng.integers(0, n, size=cfg.batch)
        labels = data.labels[idx]
        # single-component priors (plain DDPM) couple every label to component 0
        prior_labels = labels if prior.k > 1 else np.zeros_like(labels)
        batch = make_training_pairs(data.points[idx], prior_labels, prior, schedule, rng)
        cond = None
        if model.conditional:
            drop = rng.random(cfg.batch) < cfg.label_dropout
            cond = np.where(drop, model.null_label, labels)
        try:
            loss, grads = loss_and_grads(model, batch, cond)
        except DivergenceError as exc:
            raise DivergenceError(f"non-finite loss at step {state.step + 1}; "
                                  f"last finite loss {losses[-1] if losses else None}") from exc
        optimizer_step(model, grads, state, lr_at(cfg, state.step))
        if cfg.ema > 0:
            update_ema(model, state, cfg.ema)
        losses.append(loss)
        if cfg.log_every and state.step % cfg.log_every == 0:
            log.info("step %d loss %.6f", state.step, loss)
    return model, state, np.asarray(losses), rng
