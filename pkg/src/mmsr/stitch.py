"""Whole-slice and whole-volume super-resolution by tiling a trained G1.

Slices are reflect-padded so a regular grid of ``tile_size`` tiles with the
requested overlap covers them. Each tile goes through the generator on its
own; overlapping outputs are blended with separable linear ramps and the
padding is cropped off after assembly.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import ParameterError, ShapeError
from .losses import SCALE

DEFAULT_TILE = 64
DEFAULT_OVERLAP = 8
MIN_TILE = 8


@dataclass(frozen=True)
class TilePlan:
    """Tile layout for one slice shape.

    ``tiles`` holds ``(row, col, height, width)`` in the coordinates of the
    padded slice; ``padding`` is ``(top, bottom, left, right)``.
    """

    tiles: tuple[tuple[int, int, int, int], ...]
    input_shape: tuple[int, int]
    tile_size: int
    overlap: int
    padding: tuple[int, int, int, int]

    @property
    def padded_shape(self) -> tuple[int, int]:
        t, b, l, r = self.padding
        return (self.input_shape[0] + t + b, self.input_shape[1] + l + r)

    @property
    def grid(self) -> tuple[int, int]:
        rows = sorted({t[0] for t in self.tiles})
        cols = sorted({t[1] for t in self.tiles})
        return len(rows), len(cols)


def _axis_layout(n: int, tile: int, overlap: int) -> tuple[list[int], int, int]:
    stride = tile - overlap
    count = 1 if n <= tile else 1 + math.ceil((n - tile) / stride)
    covered = (count - 1) * stride + tile
    extra = covered - n
    before = extra // 2
    return [i * stride for i in range(count)], before, extra - before


def plan_tiles(shape: Sequence[int], tile_size: int = DEFAULT_TILE, overlap: int = DEFAULT_OVERLAP) -> TilePlan:
    """Lay out a grid of square tiles covering an ``(H, W)`` slice."""
    if len(shape) != 2 or min(shape) < 1:
        raise ShapeError(f"slice shape must be two positive ints, got {tuple(shape)}")
    if tile_size < MIN_TILE:
        raise ParameterError(f"tile_size must be >= {MIN_TILE}, got {tile_size}")
    if overlap < 0 or overlap >= tile_size:
        raise ParameterError(f"overlap must be in [0, tile_size), got {overlap} for tile {tile_size}")
    rows, top, bottom = _axis_layout(int(shape[0]), tile_size, overlap)
    cols, left, right = _axis_layout(int(shape[1]), tile_size, overlap)
    tiles = tuple((r, c, tile_size, tile_size) for r in rows for c in cols)
    return TilePlan(tiles, (int(shape[0]), int(shape[1])), tile_size, overlap, (top, bottom, left, right))


def _ramp(length: int, fade: int, lead: bool, trail: bool) -> np.ndarray:
    """1D blend weights; a ramp of width ``fade`` on each side that has a neighbour.

    Two neighbouring ramps over the same ``fade`` pixels sum to exactly 1.
    """
    w = np.ones(length, dtype=np.float64)
    if fade > 0:
        up = (np.arange(fade, dtype=np.float64) + 0.5) / fade
        if lead:
            w[:fade] *= up
        if trail:
            w[length - fade:] *= up[::-1]
    return w


def tile_weights(plan: TilePlan, factor: int = SCALE) -> list[np.ndarray]:
    """Per-tile output-resolution weight maps in the order of ``plan.tiles``."""
    fade = plan.overlap * factor
    size = plan.tile_size * factor
    rows = sorted({t[0] for t in plan.tiles})
    cols = sorted({t[1] for t in plan.tiles})
    out = []
    for r, c, _, _ in plan.tiles:
        i, j = rows.index(r), cols.index(c)
        wr = _ramp(size, fade, i > 0, i < len(rows) - 1)
        wc = _ramp(size, fade, j > 0, j < len(cols) - 1)
        out.append(np.outer(wr, wc))
    return out


def weight_map(plan: TilePlan, factor: int = SCALE) -> np.ndarray:
    """Accumulated blend weight over the padded output grid.

    Identically 1 whenever ``overlap <= tile_size / 2``; assembly divides by it
    regardless so larger overlaps still blend correctly.
    """
    ph, pw = plan.padded_shape
    acc = np.zeros((ph * factor, pw * factor), dtype=np.float64)
    for (r, c, h, w), wt in zip(plan.tiles, tile_weights(plan, factor)):
        acc[r * factor:(r + h) * factor, c * factor:(c + w) * factor] += wt
    return acc


def _as_generator(g1) -> Callable[[torch.Tensor], torch.Tensor]:
    if isinstance(g1, torch.nn.Module):
        g1.eval()
    return g1


@torch.no_grad()
def super_resolve_slice(g1, slice2d, plan: Optional[TilePlan] = None, batch_size: int = 16,
                        factor: int = SCALE) -> np.ndarray:
    """Super-resolve one ``(H, W)`` slice with a frozen generator.

    ``g1`` maps ``(N, 1, h, w)`` tensors to ``(N, 1, 8h, 8w)``. Returns float32.
    """
    x = np.asarray(slice2d, dtype=np.float32)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2D slice, got shape {x.shape}")
    plan = plan or plan_tiles(x.shape)
    if tuple(x.shape) != plan.input_shape:
        raise ShapeError(f"slice shape {x.shape} does not match plan for {plan.input_shape}")
    g = _as_generator(g1)
    t, b, l, r = plan.padding
    padded = np.pad(x, ((t, b), (l, r)), mode="reflect") if any(plan.padding) else x
    ph, pw = padded.shape
    acc = np.zeros((ph * factor, pw * factor), dtype=np.float64)
    wsum = np.zeros_like(acc)
    weights = tile_weights(plan, factor)
    crops = np.stack([padded[r0:r0 + h, c0:c0 + w] for r0, c0, h, w in plan.tiles])
    for start in range(0, len(plan.tiles), batch_size):
        chunk = torch.from_numpy(crops[start:start + batch_size]).unsqueeze(1)
        out = g(chunk)
        if not isinstance(out, torch.Tensor):
            out = torch.as_tensor(out)
        out = out.detach().to(torch.float64).cpu().numpy()
        if out.ndim == 4:
            out = out[:, 0]
        expected = (len(chunk), chunk.shape[-2] * factor, chunk.shape[-1] * factor)
        if out.shape != expected:
            raise ShapeError(f"generator returned {out.shape}, expected {expected}")
        for k, tile_out in enumerate(out):
            idx = start + k
            r0, c0, h, w = plan.tiles[idx]
            sl = (slice(r0 * factor, (r0 + h) * factor), slice(c0 * factor, (c0 + w) * factor))
            acc[sl] += weights[idx] * tile_out
            wsum[sl] += weights[idx]
    acc /= wsum
    H, W = plan.input_shape
    return acc[t * factor:(t + H) * factor, l * factor:(l + W) * factor].astype(np.float32)


def super_resolve_volume(g1, vol, tile_size: int = DEFAULT_TILE, overlap: int = DEFAULT_OVERLAP,
                         batch_size: int = 16):
    """Super-resolve every axial slice of a normalized volume."""
    from .data.volumes import CTVolume

    v = vol.voxels
    if vol.intensity_map is None and (np.nanmin(v) < -1 or np.nanmax(v) > 1):
        raise ParameterError(f"volume {vol.id!r} must be normalized before super-resolution")
    plan = plan_tiles(v.shape[:2], tile_size, overlap)
    slices = [super_resolve_slice(g1, v[:, :, k], plan, batch_size) for k in range(v.shape[2])]
    sx, sy, sz = vol.spacing
    meta = dict(vol.meta, source_volume=vol.id, tile_size=tile_size, overlap=overlap)
    return CTVolume(np.stack(slices, axis=2), (sx / SCALE, sy / SCALE, sz), "synthetic-micro",
                    f"{vol.id}-sr", unit=vol.unit, intensity_map=vol.intensity_map, meta=meta)


def export_png_slices(vol, directory, window: tuple[float, float] = (-1.0, 1.0), prefix: str = "slice") -> list[Path]:
    """Write each axial slice as a 16-bit grayscale PNG plus a window sidecar."""
    from PIL import Image

    lo, hi = map(float, window)
    if not hi > lo:
        raise ParameterError(f"window must satisfy lo < hi, got {window}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(vol.n_slices):
        s = np.clip((np.asarray(vol.axial(k), dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
        img = Image.fromarray(np.rint(s * 65535).astype(np.uint16))
        path = directory / f"{prefix}_{k:04d}.png"
        tmp = path.with_name(path.name + ".tmp")
        img.save(tmp, format="PNG")
        os.replace(tmp, path)
        paths.append(path)
    side = {"volume_id": vol.id, "window": [lo, hi], "bit_depth": 16, "n_slices": vol.n_slices,
            "spacing": list(vol.spacing), "unit": vol.unit}
    (directory / f"{prefix}_window.json").write_text(json.dumps(side, indent=2))
    return paths
