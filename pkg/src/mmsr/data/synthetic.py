"""Procedural lung-like volumes standing in for clinical CT and micro CT.

Each case is built from an independent procedural instance (its own RNG
stream). Micro-like cases are fine-scale specimens in air. Clinical-like cases
are made from *different* instances: a fine-scale torso phantom is blurred,
mapped to Hounsfield-like units, block-averaged 8x in-plane and corrupted with
noise. The blurred fine-scale phantom is kept as ground truth for oracle
evaluation only.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..losses import SCALE
from .patches import DatasetManifest
from .volumes import CTVolume, save_volume

AIR_HU = -1000.0
HU_PER_DENSITY = 1050.0


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int = 7
    n_cases: int = 5
    clinical_shape: tuple[int, int] = (96, 96)
    micro_shape: tuple[int, int] = (384, 384)
    depth: int = 8
    clinical_spacing: tuple[float, float, float] = (0.625, 0.625, 0.6)
    micro_spacing: tuple[float, float, float] = (52.0, 52.0, 52.0)
    blur_sigma: float = 3.0
    clinical_noise: float = 15.0
    micro_offset: float = 200.0
    micro_gain: float = 3000.0
    micro_noise: float = 60.0
    n_vessels: int = 10
    n_bronchi: int = 5
    n_nodules: int = 2


@dataclass
class SyntheticDataset:
    clinical: list[CTVolume]
    micro: list[CTVolume]
    truth: dict[str, CTVolume]
    lr_clean: dict[str, np.ndarray]
    config: SyntheticConfig = field(default_factory=SyntheticConfig)


def _tube_distance(shape, p0, direction, z_scale):
    rows, cols, slices = shape
    r = np.arange(rows, dtype=np.float32)[:, None, None] - p0[0]
    c = np.arange(cols, dtype=np.float32)[None, :, None] - p0[1]
    z = (np.arange(slices, dtype=np.float32)[None, None, :] - p0[2]) * z_scale
    d = direction
    # |v x d| for unit d
    cx = c * d[2] - z * d[1]
    cy = z * d[0] - r * d[2]
    cz = r * d[1] - c * d[0]
    return np.sqrt(cx * cx + cy * cy + cz * cz)


def lung_texture(shape, rng: np.random.Generator, cfg: SyntheticConfig, z_scale: float) -> np.ndarray:
    """Density field in [0, 1]: parenchyma speckle, vessels, bronchi, nodules."""
    speckle = ndimage.gaussian_filter(rng.standard_normal(shape).astype(np.float32), (2.0, 2.0, 0.5))
    speckle /= speckle.std() + 1e-8
    density = 0.3 + 0.06 * speckle
    extent = max(shape[0], shape[1])

    def random_line():
        p0 = rng.uniform([0, 0, 0], shape).astype(np.float32)
        d = rng.standard_normal(3)
        d[2] *= 0.5
        return p0, (d / np.linalg.norm(d)).astype(np.float32)

    for _ in range(cfg.n_vessels):
        p0, d = random_line()
        radius = rng.uniform(0.008, 0.03) * extent
        density = np.where(_tube_distance(shape, p0, d, z_scale) < radius, 0.75, density)
    for _ in range(cfg.n_bronchi):
        p0, d = random_line()
        lumen = rng.uniform(0.01, 0.025) * extent
        wall = lumen + rng.uniform(0.005, 0.01) * extent
        dist = _tube_distance(shape, p0, d, z_scale)
        density = np.where(dist < wall, 0.65, density)
        density = np.where(dist < lumen, 0.0, density)
    for _ in range(cfg.n_nodules):
        center = rng.uniform([0, 0, 0], shape)
        radius = rng.uniform(0.02, 0.05) * extent
        rr, cc, zz = np.ogrid[: shape[0], : shape[1], : shape[2]]
        d2 = (rr - center[0]) ** 2 + (cc - center[1]) ** 2 + ((zz - center[2]) * z_scale) ** 2
        density = np.maximum(density, 0.6 * np.exp(-d2 / (2 * radius**2)))
    return np.clip(density, 0.0, 1.0).astype(np.float32)


def _ellipse(shape2d, center, axes, angle=0.0):
    rr, cc = np.mgrid[: shape2d[0], : shape2d[1]].astype(np.float32)
    y, x = rr - center[0], cc - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * y + sa * x, -sa * y + ca * x
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def torso_phantom(shape, rng, cfg: SyntheticConfig, z_scale: float) -> np.ndarray:
    """Fine-scale density: air outside, soft-tissue body, two textured lungs."""
    h, w, depth = shape
    body = _ellipse((h, w), (h / 2, w / 2), (0.48 * h, 0.47 * w))
    # lungs stay inside a thin chest wall so they never touch outside air
    wall = _ellipse((h, w), (h / 2, w / 2), (0.44 * h, 0.43 * w))
    lungs = np.zeros((h, w), dtype=bool)
    for side in (0.28, 0.72):
        jitter = rng.uniform(-0.02, 0.02, 4)
        lungs |= _ellipse(
            (h, w),
            ((0.5 + jitter[0]) * h, (side + jitter[1]) * w),
            ((0.40 + jitter[2]) * h, (0.21 + jitter[3]) * w),
            angle=rng.uniform(-0.1, 0.1),
        )
    lungs &= wall
    density = np.where(body, 1.0, 0.0).astype(np.float32)[:, :, None].repeat(depth, axis=2)
    tex = lung_texture(shape, rng, cfg, z_scale)
    return np.where(lungs[:, :, None], tex, density)


def specimen_phantom(shape, rng, cfg: SyntheticConfig, z_scale: float) -> np.ndarray:
    """Fine-scale resected specimen: irregular textured blob in air."""
    h, w, _ = shape
    rr, cc = np.mgrid[:h, :w].astype(np.float32)
    theta = np.arctan2(rr - h / 2, cc - w / 2)
    radius = 0.5 * min(h, w) * (1 + sum(
        rng.uniform(-0.05, 0.05) * np.cos(k * theta + rng.uniform(0, 2 * np.pi)) for k in (2, 3, 5)
    ))
    inside = np.hypot(rr - h / 2, cc - w / 2) <= radius
    tex = lung_texture(shape, rng, cfg, z_scale)
    return np.where(inside[:, :, None], tex, 0.0).astype(np.float32)


def block_average(a: np.ndarray, factor: int = SCALE) -> np.ndarray:
    """In-plane block mean of a (rows, cols, slices) array."""
    h, w, d = a.shape
    return a.reshape(h // factor, factor, w // factor, factor, d).mean(axis=(1, 3))


def instance_id(seed: int, index: int) -> str:
    return f"inst-{seed}-{index:03d}"


def make_synthetic_dataset(cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticDataset:
    """Build disjoint clinical-like and micro-like case sets from one seed."""
    streams = np.random.SeedSequence(cfg.seed).spawn(2 * cfg.n_cases)
    clinical, micro, truth, lr_clean = [], [], {}, {}
    h, w = cfg.clinical_shape
    hr_shape = (h * SCALE, w * SCALE, cfg.depth)
    hr_spacing = (cfg.clinical_spacing[0] / SCALE, cfg.clinical_spacing[1] / SCALE, cfg.clinical_spacing[2])
    for i in range(cfg.n_cases):
        rng = np.random.Generator(np.random.PCG64(streams[i]))
        source = instance_id(cfg.seed, i)
        density = torso_phantom(hr_shape, rng, cfg, cfg.clinical_spacing[2] / hr_spacing[0])
        hu = ndimage.gaussian_filter(AIR_HU + HU_PER_DENSITY * density.astype(np.float64),
                                     (cfg.blur_sigma, cfg.blur_sigma, 0))
        hu = hu.astype(np.float32)
        clean = block_average(hu.astype(np.float64))
        noisy = clean + rng.normal(0.0, cfg.clinical_noise, clean.shape)
        vid = f"clinical-{i:02d}"
        meta = {"source_instance": source, "synthetic": True}
        clinical.append(CTVolume(noisy.astype(np.float32), cfg.clinical_spacing, "clinical", vid, meta=meta))
        truth[vid] = CTVolume(hu, hr_spacing, "clinical", f"{vid}-truth", meta=dict(meta))
        lr_clean[vid] = clean
    mh, mw = cfg.micro_shape
    for i in range(cfg.n_cases):
        rng = np.random.Generator(np.random.PCG64(streams[cfg.n_cases + i]))
        source = instance_id(cfg.seed, cfg.n_cases + i)
        density = specimen_phantom((mh, mw, cfg.depth), rng, cfg, 1.0)
        raw = cfg.micro_offset + cfg.micro_gain * ndimage.gaussian_filter(density, (0.7, 0.7, 0))
        raw = raw + rng.normal(0.0, cfg.micro_noise, raw.shape)
        vid = f"micro-{i:02d}"
        micro.append(CTVolume(raw.astype(np.float32), cfg.micro_spacing, "micro", vid, unit="um",
                              meta={"source_instance": source, "synthetic": True}))
    return SyntheticDataset(clinical, micro, truth, lr_clean, cfg)


DATASET_INDEX = "dataset.json"


def write_synthetic_dataset(ds: SyntheticDataset, directory, patches_per_case: int = 2000) -> DatasetManifest:
    """Emit raw int16 volumes (+ float32 truth) and a dataset index.

    Returns the manifest, whose paths are relative to ``directory``.
    """
    directory = Path(directory)
    clinical_paths, micro_paths, truth_paths = [], [], {}
    for vol in ds.clinical:
        rel = f"clinical/{vol.id}.raw"
        save_volume(vol, directory / rel, dtype="int16")
        clinical_paths.append(rel)
        trel = f"truth/{vol.id}.raw"
        save_volume(ds.truth[vol.id], directory / trel, dtype="float32")
        truth_paths[vol.id] = trel
    for vol in ds.micro:
        rel = f"micro/{vol.id}.raw"
        save_volume(vol, directory / rel, dtype="int16")
        micro_paths.append(rel)
    manifest = DatasetManifest(
        clinical_paths, micro_paths, patches_per_case=patches_per_case, seed=ds.config.seed,
        meta={"truth": truth_paths, "synthetic": asdict(ds.config)},
    )
    (directory / DATASET_INDEX).write_text(json.dumps(manifest.to_json(), indent=2))
    return manifest


def read_dataset_index(directory) -> DatasetManifest:
    from ..errors import ParseError

    path = Path(directory) / DATASET_INDEX
    try:
        return DatasetManifest.from_json(json.loads(path.read_text()))
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise ParseError(f"cannot read dataset index {path}: {exc}") from exc
