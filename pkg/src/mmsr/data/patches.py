"""Unpaired 2D patch sampling and the on-disk patch cache."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..errors import ParameterError, ParseError, SamplingError
from .preprocess import LungMask
from .volumes import CTVolume

PATCH_SIZES = {"clinical": 32, "micro": 256}
MIN_MASK_FRACTION = 0.5
ATTEMPTS_PER_PATCH = 100
RNG_ALGORITHM = "PCG64"


@dataclass
class PatchSample:
    patch: np.ndarray
    volume_id: str
    slice_index: int
    origin: tuple[int, int]
    modality: str

    def record(self) -> dict:
        return {
            "volume_id": self.volume_id,
            "slice_index": self.slice_index,
            "origin": list(self.origin),
            "modality": self.modality,
        }


@dataclass
class DatasetManifest:
    """Two unpaired lists of volume files plus sampling settings."""

    clinical_volumes: list[str]
    micro_volumes: list[str]
    patches_per_case: int = 2000
    seed: int = 0
    rng: str = RNG_ALGORITHM
    clinical_patch: int = PATCH_SIZES["clinical"]
    micro_patch: int = PATCH_SIZES["micro"]
    resample_each_epoch: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.patches_per_case <= 0:
            raise ParameterError("patches_per_case must be positive")
        if not self.clinical_volumes or not self.micro_volumes:
            raise ParameterError("both domains need at least one volume")
        shared = set(map(str, self.clinical_volumes)) & set(map(str, self.micro_volumes))
        if shared:
            raise ParameterError(f"volumes listed in both domains: {sorted(shared)}")
        if self.rng != RNG_ALGORITHM:
            raise ParameterError(f"unsupported RNG algorithm {self.rng!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        return cls(**d)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def sample_patches(
    vol: CTVolume,
    mask: LungMask,
    size: int,
    count: int,
    seed: int,
    min_fraction: float = MIN_MASK_FRACTION,
) -> list[PatchSample]:
    """Draw ``count`` axial patches with at least half their pixels in the mask.

    Locations are proposed uniformly (slice, row, col) and rejected until
    enough valid ones are found; the volume must already be normalized.
    """
    if mask.shape != vol.shape:
        raise ParameterError(f"mask shape {mask.shape} != volume shape {vol.shape}")
    h, w, d = vol.shape
    if size < 1 or size > h or size > w:
        raise ParameterError(f"patch size {size} does not fit slices of {h}x{w}")
    if count < 1:
        raise ParameterError("count must be positive")
    v = vol.voxels
    if np.nanmin(v) < -1 or np.nanmax(v) > 1 or not np.isfinite(v).all():
        raise ParameterError(f"volume {vol.id!r} is not normalized to [-1, 1]")

    # summed-area table over each slice for O(1) in-mask counts
    sat = np.zeros((h + 1, w + 1, d), dtype=np.int64)
    sat[1:, 1:] = mask.mask.astype(np.int64).cumsum(0).cumsum(1)
    need = min_fraction * size * size

    rng = make_rng(seed)
    out: list[PatchSample] = []
    attempts = 0
    max_attempts = ATTEMPTS_PER_PATCH * count
    while len(out) < count:
        if attempts >= max_attempts:
            raise SamplingError(
                f"found only {len(out)}/{count} valid {size}x{size} patches in {vol.id!r} "
                f"after {attempts} attempts"
            )
        attempts += 1
        k = int(rng.integers(d))
        r = int(rng.integers(h - size + 1))
        c = int(rng.integers(w - size + 1))
        inside = sat[r + size, c + size, k] - sat[r, c + size, k] - sat[r + size, c, k] + sat[r, c, k]
        if inside < need:
            continue
        patch = np.array(v[r:r + size, c:c + size, k], dtype=np.float32)
        out.append(PatchSample(patch, vol.id, k, (r, c), vol.modality))
    return out


def stack(samples: Sequence[PatchSample]) -> np.ndarray:
    return np.stack([s.patch for s in samples]).astype(np.float32)


# --- cache ----------------------------------------------------------------

CACHE_MANIFEST = "patches.json"


def save_patch_cache(samples: Sequence[PatchSample], directory, meta: Optional[dict] = None) -> Path:
    """Write one float32 file per (modality, volume) and a JSON index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple[str, str], list[PatchSample]] = {}
    for s in samples:
        groups.setdefault((s.modality, s.volume_id), []).append(s)
    files = []
    for (modality, vid), items in sorted(groups.items()):
        name = f"{modality}__{vid}.f32"
        arr = stack(items)
        arr.astype("<f4").tofile(directory / name)
        files.append({
            "file": name,
            "modality": modality,
            "volume_id": vid,
            "patch_shape": list(arr.shape[1:]),
            "entries": [s.record() for s in items],
        })
    index = {"format": "mmsr-patches-v1", "dtype": "float32", "files": files, "meta": meta or {}}
    tmp = directory / (CACHE_MANIFEST + ".tmp")
    tmp.write_text(json.dumps(index, indent=1))
    os.replace(tmp, directory / CACHE_MANIFEST)
    return directory / CACHE_MANIFEST


def load_patch_cache(directory) -> dict[str, list[PatchSample]]:
    """Read a cache written by :func:`save_patch_cache`, grouped by modality."""
    directory = Path(directory)
    try:
        index = json.loads((directory / CACHE_MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read patch cache in {directory}: {exc}") from exc
    out: dict[str, list[PatchSample]] = {}
    for f in index["files"]:
        ph, pw = f["patch_shape"]
        n = len(f["entries"])
        arr = np.fromfile(directory / f["file"], dtype="<f4")
        if arr.size != n * ph * pw:
            raise ParseError(f"{f['file']}: expected {n * ph * pw} values, found {arr.size}")
        arr = arr.reshape(n, ph, pw)
        for patch, e in zip(arr, f["entries"]):
            out.setdefault(f["modality"], []).append(
                PatchSample(patch.copy(), e["volume_id"], e["slice_index"], tuple(e["origin"]), e["modality"])
            )
    return out


@dataclass
class PatchPair:
    """Unpaired training sets: ``x`` low-res clinical, ``y`` high-res micro (N, H, W)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.float32)
        if self.x.ndim != 3 or self.y.ndim != 3 or len(self.x) == 0 or len(self.y) == 0:
            raise ParameterError("patch sets must be nonempty (N, H, W) arrays")


def extract_patches(manifest: DatasetManifest, base_dir=None, epoch: int = 0) -> dict[str, list[PatchSample]]:
    """Load, segment, normalize and sample every volume listed in ``manifest``.

    Returns samples grouped by modality. ``epoch`` > 0 draws a different,
    still deterministic, set of locations.
    """
    from .preprocess import normalize, segment_lung
    from .volumes import load_volume

    base = Path(base_dir) if base_dir is not None else Path(".")
    entropy = manifest.seed if epoch == 0 else [manifest.seed, epoch]
    seeds = np.random.SeedSequence(entropy).generate_state(
        len(manifest.clinical_volumes) + len(manifest.micro_volumes)
    )
    sets: dict[str, list[PatchSample]] = {"clinical": [], "micro": []}
    jobs = [("clinical", p, manifest.clinical_patch) for p in manifest.clinical_volumes]
    jobs += [("micro", p, manifest.micro_patch) for p in manifest.micro_volumes]
    for (modality, rel, size), seed in zip(jobs, seeds):
        vol = load_volume(base / rel, modality)
        mask = segment_lung(vol)
        vol = normalize(vol, mask)
        sets[modality] += sample_patches(vol, mask, size, manifest.patches_per_case, int(seed))
    return sets


def build_patch_pair(manifest: DatasetManifest, base_dir=None, epoch: int = 0) -> PatchPair:
    """Training arrays for ``manifest``; see :func:`extract_patches`."""
    sets = extract_patches(manifest, base_dir, epoch)
    return PatchPair(stack(sets["clinical"]), stack(sets["micro"]))


def patch_pair_from_cache(directory) -> PatchPair:
    groups = load_patch_cache(directory)
    if "clinical" not in groups or "micro" not in groups:
        raise ParseError(f"patch cache in {directory} lacks one of the two domains")
    return PatchPair(stack(groups["clinical"]), stack(groups["micro"]))
