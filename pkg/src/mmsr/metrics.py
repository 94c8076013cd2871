"""Downsample-consistency and ground-truth metrics, reports and montages.

Consistency metrics compare a clinical slice with the 8x8 block average of
its super-resolved version, which needs no paired high-res data. Oracle
metrics compare against retained ground truth and exist only for synthetic
cases. Reported SSIM uses the standard global form; training may use the
printed variant, and the report digest records both.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ParseError, ShapeError
from .losses import SCALE, STANDARD_SSIM, SSIMParams, avg_downsample_f, ssim_index

PSNR_PEAK = 2.0
PSNR_CAP = 99.0


@dataclass(frozen=True)
class Metrics:
    mse: float
    psnr: float
    ssim: float


def psnr(mse: float, peak: float = PSNR_PEAK) -> float:
    """PSNR in dB on the normalized scale, capped at 99 dB (also for MSE 0)."""
    if mse < 0 or not math.isfinite(mse):
        raise ValueError(f"invalid MSE {mse}")
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _stack2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ShapeError(f"expected a slice or a stack of slices, got shape {a.shape}")
    return a


def _triple(a: np.ndarray, b: np.ndarray, p: SSIMParams) -> Metrics:
    err = float(np.mean((a - b) ** 2))
    s = float(ssim_index(torch.from_numpy(a), torch.from_numpy(b), p, reduction="mean"))
    return Metrics(err, psnr(err), s)


def consistency_metrics(x, x_sr, p: SSIMParams = STANDARD_SSIM) -> Metrics:
    """Compare ``x`` with the block-averaged ``x_sr`` (slices or slice stacks)."""
    x = _stack2d(x)
    x_sr = _stack2d(x_sr)
    if x_sr.shape != (x.shape[0], x.shape[1] * SCALE, x.shape[2] * SCALE):
        raise ShapeError(f"super-resolved shape {x_sr.shape} is not {SCALE}x of {x.shape}")
    down = avg_downsample_f(torch.from_numpy(x_sr)).numpy()
    return _triple(x, down, p)


def oracle_metrics(x_sr, hr_truth, p: SSIMParams = STANDARD_SSIM) -> Metrics:
    x_sr = _stack2d(x_sr)
    hr_truth = _stack2d(hr_truth)
    if x_sr.shape != hr_truth.shape:
        raise ShapeError(f"shape mismatch {x_sr.shape} vs {hr_truth.shape}")
    return _triple(x_sr, hr_truth, p)


def bicubic_upsample(lr, factor: int = SCALE) -> np.ndarray:
    """Bicubic ``factor``x upsample of one slice (float32)."""
    from PIL import Image

    lr = np.asarray(lr, dtype=np.float32)
    if lr.ndim != 2:
        raise ShapeError(f"expected a 2D slice, got shape {lr.shape}")
    h, w = lr.shape
    img = Image.fromarray(lr, mode="F").resize((w * factor, h * factor), Image.Resampling.BICUBIC)
    return np.asarray(img, dtype=np.float32)


# --- report ---------------------------------------------------------------

_TRIPLE = lambda prefix: {  # noqa: E731
    "type": "object",
    "required": [f"{prefix}mse", f"{prefix}psnr", f"{prefix}ssim"],
    "properties": {f"{prefix}{k}": {"type": "number"} for k in ("mse", "psnr", "ssim")},
    "additionalProperties": False,
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["per_volume", "config_digest"],
    "properties": {
        "per_volume": {"type": "object", "additionalProperties": _TRIPLE("consistency_")},
        "oracle": {"type": "object", "additionalProperties": _TRIPLE("hr_")},
        "baseline": {"type": "object", "additionalProperties": _TRIPLE("consistency_")},
        "baseline_oracle": {"type": "object", "additionalProperties": _TRIPLE("hr_")},
        "config_digest": {"type": "string", "pattern": "^train-ssim=(printed|standard);report-ssim=standard;sha256=[0-9a-f]{64}$"},
        "config": {"type": "object"},
    },
    "additionalProperties": False,
}


def config_digest(config: dict, train_ssim_form: str = "printed") -> str:
    """Readable tag of both SSIM forms plus a hash of the run configuration."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode()
    return f"train-ssim={train_ssim_form};report-ssim=standard;sha256={hashlib.sha256(blob).hexdigest()}"


def _named(m: Metrics, prefix: str) -> dict:
    return {f"{prefix}mse": m.mse, f"{prefix}psnr": m.psnr, f"{prefix}ssim": m.ssim}


@dataclass
class MetricsReport:
    per_volume: dict[str, dict[str, float]]
    config_digest: str
    oracle: Optional[dict[str, dict[str, float]]] = None
    baseline: Optional[dict[str, dict[str, float]]] = None
    baseline_oracle: Optional[dict[str, dict[str, float]]] = None
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"per_volume": self.per_volume, "config_digest": self.config_digest}
        for key in ("oracle", "baseline", "baseline_oracle"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        if self.config:
            out["config"] = self.config
        validate_report(out)
        return out

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        validate_report(d)
        return cls(d["per_volume"], d["config_digest"], d.get("oracle"), d.get("baseline"),
                   d.get("baseline_oracle"), d.get("config", {}))

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        os.replace(tmp, path)
        return path

    @classmethod
    def read(cls, path) -> "MetricsReport":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read metrics report {path}: {exc}") from exc


def validate_report(d: dict):
    import jsonschema

    try:
        jsonschema.validate(d, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ParseError(f"metrics report does not match schema: {exc.message}") from exc


def evaluate_volumes(sr_volumes: dict, lr_volumes: dict, truths: Optional[dict] = None,
                     config: Optional[dict] = None, train_ssim_form: str = "printed") -> MetricsReport:
    """Build a report from matching dicts of normalized LR and SR volumes.

    ``truths`` maps volume id to a ground-truth volume already on the same
    normalized scale. The bicubic baseline is evaluated alongside.
    """
    config = dict(config or {})
    config.setdefault("train_ssim_form", train_ssim_form)
    config.setdefault("report_ssim_form", "standard")
    per, base, orc, borc = {}, {}, {}, {}
    for vid, lr in lr_volumes.items():
        lr_s = np.moveaxis(np.asarray(lr.voxels, dtype=np.float64), 2, 0)
        sr_s = np.moveaxis(np.asarray(sr_volumes[vid].voxels, dtype=np.float64), 2, 0)
        bic = np.stack([bicubic_upsample(s) for s in lr_s]).astype(np.float64)
        per[vid] = _named(consistency_metrics(lr_s, sr_s), "consistency_")
        base[vid] = _named(consistency_metrics(lr_s, bic), "consistency_")
        if truths and vid in truths:
            hr = np.moveaxis(np.asarray(truths[vid].voxels, dtype=np.float64), 2, 0)
            orc[vid] = _named(oracle_metrics(sr_s, hr), "hr_")
            borc[vid] = _named(oracle_metrics(bic, hr), "hr_")
    return MetricsReport(per, config_digest(config, train_ssim_form), orc or None, base, borc or None, config)


# --- montage --------------------------------------------------------------

MONTAGE_LABELS = ("clinical (nearest)", "super-resolved", "bicubic")
HEADER_HEIGHT = 14


def _to_u8(a: np.ndarray, window=(-1.0, 1.0)) -> np.ndarray:
    lo, hi = window
    return np.rint(np.clip((a - lo) / (hi - lo), 0, 1) * 255).astype(np.uint8)


def emit_montage(lr, sr, baseline, path, labels=MONTAGE_LABELS, window=(-1.0, 1.0)) -> Path:
    """Side-by-side PNG: nearest-upsampled input, SR result and baseline.

    The image is ``3 * 8W`` pixels wide with a text strip above the panels.
    """
    from PIL import Image, ImageDraw

    lr = np.asarray(lr, dtype=np.float64)
    sr = np.asarray(sr, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if lr.ndim != 2 or sr.shape != baseline.shape or sr.shape != (lr.shape[0] * SCALE, lr.shape[1] * SCALE):
        raise ShapeError(f"montage needs lr HxW and sr/baseline 8Hx8W, got {lr.shape}, {sr.shape}, {baseline.shape}")
    big = np.repeat(np.repeat(lr, SCALE, 0), SCALE, 1)
    panels = np.concatenate([_to_u8(p, window) for p in (big, sr, baseline)], axis=1)
    h, w = sr.shape
    canvas = Image.new("L", (3 * w, h + HEADER_HEIGHT), color=0)
    canvas.paste(Image.fromarray(panels), (0, HEADER_HEIGHT))
    draw = ImageDraw.Draw(canvas)
    for i, text in enumerate(labels):
        draw.text((i * w + 2, 1), text, fill=255)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    canvas.save(tmp, format="PNG", optimize=False)
    os.replace(tmp, path)
    return path
