"""File formats: dataset/sample/report CSV, checkpoint JSON, SVG scatter plots."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .datagen import LabeledDataset
from .nn import AdamState, Denoiser
from .prior import MixturePrior
from .schedule import NoiseSchedule

CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def fmt(v: float) -> str:
    return format(float(v), ".17g")


# -- CSV ----------------------------------------------------------------------

def write_dataset_csv(path, data: LabeledDataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j + 1}" for j in range(data.dim)] + ["label"])
        for row, lab in zip(data.points, data.labels):
            w.writerow([fmt(v) for v in row] + [int(lab)])


def read_dataset_csv(path, k: int | None = None) -> LabeledDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][-1] != "label":
        raise FormatError(f"{path}: header must end with 'label'")
    dim = len(rows[0]) - 1
    if rows[0][:-1] != [f"x{j + 1}" for j in range(dim)]:
        raise FormatError(f"{path}: expected header x1..x{dim},label")
    try:
        pts = np.array([[float(v) for v in r[:-1]] for r in rows[1:]], dtype=np.float64)
        labels = np.array([int(r[-1]) for r in rows[1:]], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed row ({exc})") from exc
    if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] != dim:
        raise FormatError(f"{path}: no data rows or ragged rows")
    k = int(labels.max()) + 1 if k is None else k
    return LabeledDataset(pts, labels, k, {"source": str(path)})


def write_samples_csv(path, x, requested, assigned) -> None:
    x = np.atleast_2d(x)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j + 1}" for j in range(x.shape[1])] + ["requested_label", "assigned_label"])
        for row, r, a in zip(x, requested, assigned):
            w.writerow([fmt(v) for v in row] + [int(r), int(a)])


def read_samples_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][-2:] != ["requested_label", "assigned_label"]:
        raise FormatError(f"{path}: header must end with requested_label,assigned_label")
    try:
        x = np.array([[float(v) for v in r[:-2]] for r in rows[1:]], dtype=np.float64)
        req = np.array([int(r[-2]) for r in rows[1:]], dtype=np.int64)
        asg = np.array([int(r[-1]) for r in rows[1:]], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed row ({exc})") from exc
    if x.ndim != 2 or x.shape[0] == 0:
        raise FormatError(f"{path}: no sample rows")
    return x, req, asg


def write_rows_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


def to_jsonable(obj):
    """Plain Python containers/scalars; numpy values unwrapped, NaN becomes None."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if math.isnan(obj) else float(obj)
    return obj


def dumps(obj, indent: int = 1, _level: int = 0) -> str:
    """JSON text with sorted keys and every float at 17 significant digits.

    Lists of scalars stay on one line so parameter arrays remain compact.
    """
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {dumps(obj[k], indent, _level + 1)}"
                 for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if all(not isinstance(v, (dict, list)) for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        return ("[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj)
                + "\n" + end + "]")
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError("non-finite float in JSON output")
        text = fmt(obj)
        return text if any(c in text for c in ".en") else text + ".0"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(to_jsonable(obj)) + "\n")


# -- checkpoints ----------------------------------------------------------------

def checkpoint_dict(model: Denoiser, schedule: NoiseSchedule, prior: MixturePrior,
                    state: AdamState | None, rng_state: dict | None, train_cfg: dict,
                    data_modes: dict | None) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "parameterization": model.parameterization,
        "model": model.config(),
        "parameters": model.get_flat(),
        "schedule": schedule.to_config(),
        "prior": prior.to_json(),
        "optimizer": None if state is None else state.to_json(),
        "rng_state": rng_state,
        "training": train_cfg,
        "data_modes": data_modes,
    }


def save_checkpoint(path, ckpt: dict) -> None:
    write_json(path, ckpt)


def load_checkpoint(path) -> dict:
    """Parse a checkpoint and rebuild its objects under ``model``/``schedule``/..."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not JSON ({exc})") from exc
    version = raw.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version!r}")
    model = Denoiser.from_flat(raw["model"], raw["parameters"])
    out = dict(raw)
    out["model"] = model
    out["schedule"] = NoiseSchedule.from_config(raw["schedule"])
    out["prior"] = MixturePrior.from_json(raw["prior"])
    out["optimizer"] = (None if raw.get("optimizer") is None
                        else AdamState.from_json(raw["optimizer"], model))
    out["raw"] = raw
    return out


# -- SVG ------------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22")


def scatter_svg(path, x, labels=None, *, title: str = "", extent: float | None = None,
                centers=None, size: int = 360) -> None:
    """Fixed-viewBox scatter of the first two coordinates, colored by label."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    note = ""
    if x.shape[1] == 1:
        x = np.concatenate([x, np.zeros_like(x)], axis=1)
    elif x.shape[1] > 2:
        note = f"first 2 of {x.shape[1]} coordinates"
    xy = x[:, :2]
    if extent is None:
        finite = xy[np.all(np.isfinite(xy), axis=1)]
        extent = float(np.max(np.abs(finite))) * 1.05 if finite.size else 1.0
        extent = max(extent, 1e-9)
    labels = np.zeros(len(xy), dtype=int) if labels is None else np.asarray(labels)
    pad = 20
    scale = (size - 2 * pad) / (2 * extent)

    def px(p):
        return pad + (p[0] + extent) * scale, size - pad - (p[1] + extent) * scale

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {size} {size}" '
        f'width="{size}" height="{size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<rect x="{pad}" y="{pad}" width="{size - 2 * pad}" height="{size - 2 * pad}" '
        'fill="none" stroke="#999" stroke-width="0.5"/>',
    ]
    cx, cy = px((0.0, 0.0))
    parts.append(f'<line x1="{pad}" y1="{cy:.2f}" x2="{size - pad}" y2="{cy:.2f}" stroke="#ddd"/>')
    parts.append(f'<line x1="{cx:.2f}" y1="{pad}" x2="{cx:.2f}" y2="{size - pad}" stroke="#ddd"/>')
    for p, lab in zip(xy, labels):
        if not np.all(np.isfinite(p)) or np.any(np.abs(p) > extent):
            continue
        u, v = px(p)
        parts.append(f'<circle cx="{u:.2f}" cy="{v:.2f}" r="1.3" '
                     f'fill="{PALETTE[int(lab) % len(PALETTE)]}" fill-opacity="0.6"/>')
    if centers is not None:
        for i, c in enumerate(np.atleast_2d(centers)):
            u, v = px(c[:2])
            parts.append(f'<path d="M{u - 5:.2f},{v:.2f}h10M{u:.2f},{v - 5:.2f}v10" '
                         f'stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="2"/>')
    parts.append(f'<text x="{pad}" y="14" font-family="sans-serif" font-size="11">'
                 f'{_esc(title)}</text>')
    parts.append(f'<text x="{size - pad}" y="{size - 5}" text-anchor="end" '
                 f'font-family="sans-serif" font-size="9">extent ±{extent:.3g}'
                 f'{"; " + note if note else ""}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def nan_to_none(v):
    return None if isinstance(v, float) and math.isnan(v) else v
