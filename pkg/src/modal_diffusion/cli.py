"""``modal-diffusion`` command-line entry point.

Every command reads an optional JSON config, applies ``--set a.b=value``
overrides (values parsed as JSON when possible) and ``--seed``, echoes the
effective config to ``<out>/config.json`` and writes its artifacts next to it.
Exit codes: 0 success, 1 usage/config/input error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .baselines import GuidanceConfig, SoftClassifier, cfg_sample, cg_sample
from .datagen import generate
from .diffusion import EvalCounter, sample_chains
from .metrics import evaluate, hard_classify
from .nn import DivergenceError, TrainConfig, ema_model, lr_at, train_model
from .prior import (Component, MixturePrior, PriorLayoutConfig, build_ring_prior,
                    build_simplex_prior, fit_empirical_prior, standard_prior)
from .schedule import build_schedule

log = logging.getLogger("modal_diffusion")

COMMANDS = ("gen", "train", "sample", "eval", "verify", "repro-toy")


class ConfigError(ValueError):
    """Bad command line, config value or input file."""


class NumericFailure(RuntimeError):
    """A run finished but its numbers are unusable (divergence, failed check)."""


# -- configuration -------------------------------------------------------------

OPEN = object()   # marks sections whose keys are not fixed in advance

DEFAULTS = {
    "gen": {
        "seed": 0,
        "generator": OPEN,
        "output": {"dataset": "dataset.csv"},
    },
    "train": {
        "seed": 0,
        "data": {"file": None},
        "schedule": {"T": 100, "beta_min": 1e-4, "beta_max": 0.3, "kind": "linear"},
        "prior": {"layout": "ring", "delta": 4.0, "sigma": 1.0, "confidence": 0.99,
                  "phase": math.pi / 4, "weights": None},
        "training": TrainConfig().to_dict(),
        "resume": None,
        "stop_at": None,
        "output": {"checkpoint": "checkpoint.json", "losses": "losses.csv"},
    },
    "sample": {
        "seed": 0,
        "checkpoint": None,
        "sampling": {"n": 1000, "selector": "mixture", "component": 0, "weights": None,
                     "use_ema": True, "clip": None},
        "guidance": {"kind": "none", "weight": 0.0, "target_label": 0, "tau": None},
        "output": {"samples": "samples.csv", "svg": "samples.svg"},
    },
    "eval": {
        "seed": 0,
        "samples": None,
        "modes": {"dataset": None, "checkpoint": None, "centers": None, "sigmas": None,
                  "data_std": None},
        "reference": {"dataset": None},
        "metrics": {"rho": 3.0},
        "output": {"report_json": "report.json", "report_csv": "report.csv"},
    },
    "verify": {
        "seed": 0,
        "inject": None,
        "fast": False,
        "output": {"report": "verify.json"},
    },
    "repro-toy": {
        "seed": 0,
        "toy": OPEN,
        "output": {"dir": "."},
    },
}

GEN_DEFAULT = {"kind": "four_mode_2d"}   # other arguments take each generator's defaults


def _defaults(command: str) -> dict:
    d = {k: (copy.deepcopy(v) if v is not OPEN else {}) for k, v in DEFAULTS[command].items()}
    if command == "gen":
        d["generator"] = dict(GEN_DEFAULT)
    return d


def merge(base: dict, over: dict, schema: dict, path: str = "") -> dict:
    """Recursive update that rejects keys absent from ``schema``."""
    out = dict(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if schema is not OPEN and k not in schema:
            raise ConfigError(f"unknown config key {where!r}")
        sub = OPEN if schema is OPEN else schema[k]
        if isinstance(v, dict) and isinstance(out.get(k), dict) and \
                (sub is OPEN or isinstance(sub, dict)):
            out[k] = merge(out[k], v, sub, where + ".")
        else:
            out[k] = v
    return out


def parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    cur = out
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def effective_config(command: str, config_path=None, overrides=(), seed=None) -> dict:
    cfg = _defaults(command)
    schema = DEFAULTS[command]
    if config_path is not None:
        try:
            file_cfg = json.loads(Path(config_path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = merge(cfg, file_cfg, schema)
    for item in overrides:
        cfg = merge(cfg, parse_override(item), schema)
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg.get("seed"), int) or isinstance(cfg.get("seed"), bool):
        raise ConfigError("seed must be an integer")
    return cfg


def _require_file(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} not given")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


# -- commands --------------------------------------------------------------------

def cmd_gen(cfg: dict, out: Path) -> dict:
    gen_cfg = dict(cfg["generator"])
    gen_cfg["seed"] = cfg["seed"]
    try:
        data = generate(gen_cfg)
    except TypeError as exc:
        raise ConfigError(f"bad generator options: {exc}") from exc
    path = out / cfg["output"]["dataset"]
    io.write_dataset_csv(path, data)
    io.write_json(path.with_suffix(".provenance.json"),
                  {"provenance": data.provenance, "k": data.k, "dim": data.dim,
                   "n": len(data), "label_means": data.label_means(),
                   "label_stds": data.label_stds()})
    log.info("wrote %d rows (dim %d) to %s", len(data), data.dim, path)
    return {"dataset": str(path)}


def build_prior(block: dict, data) -> MixturePrior:
    layout = block["layout"]
    k, dim = data.k, data.dim
    if layout == "standard":
        return standard_prior(dim)
    if layout == "empirical":
        return fit_empirical_prior(data)
    if layout not in ("simplex", "ring"):
        raise ConfigError(f"prior.layout must be standard, empirical, simplex or ring; "
                          f"got {layout!r}")
    lcfg = PriorLayoutConfig(k, dim, float(block["delta"]), float(block["confidence"]))
    sigma = block["sigma"]
    sigmas = list(sigma) if isinstance(sigma, list) else [float(sigma)] * k
    weights = block.get("weights")
    if layout == "simplex":
        if k > dim:
            raise ConfigError(f"simplex layout needs k <= dim (k={k}, dim={dim}); use 'ring'")
        return build_simplex_prior(lcfg, weights, sigmas)
    return build_ring_prior(lcfg, weights, sigmas, phase=float(block["phase"]))


def data_modes(data) -> dict:
    stds = data.label_stds()
    return {"k": data.k, "dim": data.dim, "centers": data.label_means(),
            "sigmas": stds, "data_std": float(math.sqrt(float(np.mean(stds ** 2))))}


def cmd_train(cfg: dict, out: Path) -> dict:
    data = io.read_dataset_csv(_require_file(cfg["data"]["file"], "dataset file"))
    tcfg_dict = dict(cfg["training"])
    tcfg_dict["seed"] = cfg["seed"]
    try:
        tcfg = TrainConfig.from_dict(tcfg_dict)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    model = state = rng = None
    if cfg["resume"] is not None:
        ck = io.load_checkpoint(_require_file(cfg["resume"], "resume checkpoint"))
        schedule, prior = ck["schedule"], ck["prior"]
        model, state = ck["model"], ck["optimizer"]
        rng = np.random.default_rng()
        rng.bit_generator.state = ck["rng_state"]
        if model.dim != data.dim:
            raise ConfigError("resume checkpoint does not match the dataset dimension")
    else:
        sc = cfg["schedule"]
        schedule = build_schedule(int(sc["T"]), float(sc["beta_min"]), float(sc["beta_max"]),
                                  sc["kind"])
        prior = build_prior(cfg["prior"], data)
        if not schedule.terminal_valid:
            log.warning("schedule has alpha_bar_T = %.3g >= 1e-4; the terminal "
                        "distribution will not match the prior", schedule.alpha_bars[-1])
    t0 = time.perf_counter()
    until = None if cfg["stop_at"] is None else int(cfg["stop_at"])
    model, state, losses, rng = train_model(data, prior, schedule, tcfg, model, state, rng,
                                            until=until)
    log.info("trained to step %d in %.1fs", state.step, time.perf_counter() - t0)
    ckpt = io.checkpoint_dict(model, schedule, prior, state, rng.bit_generator.state,
                              tcfg.to_dict(), data_modes(data))
    path = out / cfg["output"]["checkpoint"]
    io.save_checkpoint(path, ckpt)
    first = state.step - len(losses)
    io.write_rows_csv(out / cfg["output"]["losses"], ["step", "loss", "lr"],
                      [[first + i + 1, float(l), lr_at(tcfg, first + i)]
                       for i, l in enumerate(losses)])
    return {"checkpoint": str(path), "step": state.step}


def cmd_sample(cfg: dict, out: Path) -> dict:
    ck = io.load_checkpoint(_require_file(cfg["checkpoint"], "checkpoint"))
    sc, gc = cfg["sampling"], cfg["guidance"]
    model = ema_model(ck["model"], ck["optimizer"]) if sc["use_ema"] else ck["model"]
    prior, schedule = ck["prior"], ck["schedule"]
    modes = ck.get("data_modes")
    if modes is None:
        raise ConfigError("checkpoint carries no data_modes; cannot assign labels")
    centers, sigmas = np.asarray(modes["centers"]), np.asarray(modes["sigmas"])
    n = int(sc["n"])
    if n < 1:
        raise ConfigError("sampling.n must be >= 1")
    if sc["weights"] is not None:
        w = np.asarray(sc["weights"], dtype=np.float64)
        if w.shape != (prior.k,) or np.any(w < 0) or not math.isclose(w.sum(), 1.0,
                                                                         abs_tol=1e-12):
            raise ConfigError(f"sampling.weights must be {prior.k} non-negative values "
                              "summing to 1")
        prior = MixturePrior(tuple(Component(c.mean, c.sigma, float(wi))
                                   for c, wi in zip(prior.components, w)),
                             prior.source, prior.delta)
    rng = np.random.default_rng([cfg["seed"], 3])
    counter = EvalCounter()
    try:
        guidance = GuidanceConfig(gc["kind"], float(gc["weight"]), int(gc["target_label"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if guidance.kind != "none":
        if prior.k != 1:
            raise ConfigError("guidance baselines need a model trained with the standard prior")
        if not 0 <= guidance.target_label < len(centers):
            raise ConfigError(f"guidance.target_label must lie in [0, {len(centers)})")
        requested = np.full(n, guidance.target_label)
        if guidance.kind == "cg":
            tau = gc["tau"] if gc["tau"] is not None else modes["data_std"] ** 2
            clf = SoftClassifier(centers, float(tau))
            x = cg_sample(model, clf, guidance, schedule, rng, n, clip=sc["clip"],
                          counter=counter)
        else:
            if not model.conditional:
                raise ConfigError("cfg guidance needs a label-conditional checkpoint")
            x = cfg_sample(model, guidance, schedule, rng, n, clip=sc["clip"], counter=counter)
    else:
        if sc["selector"] == "component":
            comp = int(sc["component"])
            if not 0 <= comp < prior.k:
                raise ConfigError(f"component {comp} outside the prior's [0, {prior.k})")
        elif sc["selector"] == "mixture":
            comp = None
        else:
            raise ConfigError("sampling.selector must be 'mixture' or 'component'")
        x, idx = sample_chains(model, prior, schedule, rng, n, component=comp,
                               clip=sc["clip"], counter=counter)
        requested = idx if prior.k > 1 else np.full(n, -1)
    assigned = hard_classify(x, centers, sigmas)
    path = out / cfg["output"]["samples"]
    io.write_samples_csv(path, x, requested, assigned)
    result = {"samples": str(path), "model_evals": counter.model_evals,
              "model_vjps": counter.model_vjps, "steps": counter.steps}
    if cfg["output"]["svg"] and x.shape[1] == 2:
        colors = np.where(requested >= 0, requested, assigned)
        io.scatter_svg(out / cfg["output"]["svg"], x, colors, title=f"{n} samples",
                       centers=centers)
        result["svg"] = str(out / cfg["output"]["svg"])
    return result


def _modes_for_eval(block: dict):
    if block["centers"] is not None:
        centers = np.asarray(block["centers"], dtype=np.float64)
        sig = block["sigmas"]
        sigmas = np.ones(len(centers)) if sig is None else np.asarray(sig, dtype=np.float64)
        std = block["data_std"]
        if std is None:
            std = float(math.sqrt(np.mean(sigmas ** 2)))
        return centers, sigmas, float(std)
    if block["dataset"] is not None:
        m = data_modes(io.read_dataset_csv(_require_file(block["dataset"], "modes dataset")))
    elif block["checkpoint"] is not None:
        raw = json.loads(_require_file(block["checkpoint"], "modes checkpoint").read_text())
        m = raw.get("data_modes")
        if m is None:
            raise ConfigError("checkpoint carries no data_modes")
    else:
        raise ConfigError("eval needs modes.centers, modes.dataset or modes.checkpoint")
    std = m["data_std"] if block["data_std"] is None else block["data_std"]
    return np.asarray(m["centers"]), np.asarray(m["sigmas"]), float(std)


def cmd_eval(cfg: dict, out: Path) -> dict:
    x, req, assigned = io.read_samples_csv(_require_file(cfg["samples"], "samples file"))
    centers, sigmas, std = _modes_for_eval(cfg["modes"])
    if x.shape[1] != centers.shape[1]:
        raise ConfigError("sample dimension does not match the mode centers")
    ref = ref_labels = None
    if cfg["reference"]["dataset"] is not None:
        rd = io.read_dataset_csv(_require_file(cfg["reference"]["dataset"], "reference"))
        ref, ref_labels = rd.points, rd.labels
    # unconditional samples are grouped by their assigned mode
    conditioned = req >= 0
    groups = np.where(conditioned, req, hard_classify(x, centers, sigmas))
    report = evaluate(x, groups, centers, sigmas, std, ref, ref_labels,
                      rho=float(cfg["metrics"]["rho"]), config=cfg)
    if not conditioned.any():
        report.acc = float("nan")
        report.acc_per_mode = [float("nan")] * len(centers)
    io.write_json(out / cfg["output"]["report_json"], report.to_json())
    rows = [[i, report.requested_per_mode[i], report.acc_per_mode[i],
             report.per_mode_energy_distance[i], ""] for i in range(len(centers))]
    rows.append(["all", report.n_samples, report.acc, "", report.spurious_rate])
    io.write_rows_csv(out / cfg["output"]["report_csv"],
                      ["mode", "n", "acc", "energy_distance", "spurious_rate"], rows)
    return {"acc": report.acc, "spurious_rate": report.spurious_rate}


def cmd_verify(cfg: dict, out: Path) -> dict:
    from .verify import INJECTIONS, run_all

    if cfg["inject"] is not None and cfg["inject"] not in INJECTIONS:
        raise ConfigError(f"inject must be one of {INJECTIONS}")
    results = run_all(inject=cfg["inject"], fast=bool(cfg["fast"]))
    for r in results:
        print(r.line())
    report = [{k: v for k, v in r.to_json().items() if k != "seconds"} for r in results]
    io.write_json(out / cfg["output"]["report"], {"inject": cfg["inject"], "checks": report,
                                                  "all_passed": all(r.passed for r in results)})
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericFailure(f"verification failed: {', '.join(failed)}")
    return {"checks": len(results)}


def cmd_repro_toy(cfg: dict, out: Path) -> dict:
    from .toy import ToyConfig, run_toy

    toy = dict(cfg["toy"])
    toy["seed"] = cfg["seed"]
    try:
        tc = ToyConfig.from_dict(toy)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    target = out / cfg["output"]["dir"]
    result = run_toy(tc, target)
    for r in result.rows:
        print(f"{r['panel']:<14s} acc={r['acc']:.4f} spurious={r['spurious_rate']:.4f} "
              f"mean_ed={r['mean_ed']:.4f}")
    for k, v in result.checks().items():
        print(f"{k}: {v}")
    return {"dir": str(target)}


HANDLERS = {"gen": cmd_gen, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "verify": cmd_verify, "repro-toy": cmd_repro_toy}


# -- entry point ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="modal-diffusion", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, repeatable")
        sp.add_argument("--seed", type=int, help="global seed (overrides config)")
        sp.add_argument("--out", default="out", help="output directory (default: out)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = effective_config(args.command, args.config, args.set, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        io.write_json(out / "config.json", {"command": args.command, **cfg})
        result = HANDLERS[args.command](cfg, out)
    except (ConfigError, io.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, FloatingPointError, NumericFailure) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TypeError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    log.info("done: %s", result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
