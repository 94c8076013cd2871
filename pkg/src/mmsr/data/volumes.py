"""CT volume container and on-disk formats (NIfTI, raw + JSON sidecar)."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import FormatError, ParameterError, ParseError

MODALITIES = ("clinical", "micro", "synthetic-micro")
UNITS = ("mm", "um")
RAW_SUFFIXES = (".raw", ".bin")
RAW_DTYPES = ("int16", "float32")


@dataclass(frozen=True)
class IntensityMap:
    """Affine map ``[lo, hi] -> [-1, 1]`` applied during normalization."""

    lo: float
    hi: float

    def forward(self, v):
        out = (np.clip(v, self.lo, self.hi) - self.lo) / (self.hi - self.lo) * 2.0 - 1.0
        return np.clip(out, -1.0, 1.0)

    def inverse(self, v):
        return (np.asarray(v, dtype=np.float64) + 1.0) / 2.0 * (self.hi - self.lo) + self.lo


@dataclass
class CTVolume:
    """3D scalar grid indexed ``(row, col, slice)``; axial slices are ``voxels[:, :, k]``."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    modality: str
    id: str
    unit: str = "mm"
    intensity_map: Optional[IntensityMap] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or self.voxels.size == 0:
            raise ParameterError(f"volume {self.id!r} must be a nonempty 3D grid, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ParameterError(f"spacing must be three positive values, got {self.spacing}")
        if self.modality not in MODALITIES:
            raise ParameterError(f"unknown modality {self.modality!r}")
        if self.unit not in UNITS:
            raise ParameterError(f"unknown spacing unit {self.unit!r}")

    @property
    def shape(self):
        return self.voxels.shape

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[2]

    def axial(self, k: int) -> np.ndarray:
        return self.voxels[:, :, k]

    def with_voxels(self, voxels, **changes) -> "CTVolume":
        return replace(self, voxels=voxels, meta=dict(self.meta), **changes)


def _is_nifti(path: Path) -> bool:
    name = path.name.lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def load_volume(path, modality: Optional[str] = None) -> CTVolume:
    """Read a NIfTI file or a raw volume with its JSON sidecar.

    ``modality`` overrides the tag stored in the sidecar. NIfTI files may
    have an optional sidecar next to them; without one they load as clinical.
    """
    path = Path(path)
    if _is_nifti(path):
        return _load_nifti(path, modality)
    if path.suffix.lower() in RAW_SUFFIXES:
        return _load_raw(path, modality)
    raise FormatError(f"unrecognized volume format: {path.name}")


def _load_nifti(path: Path, modality):
    import nibabel as nib

    if not path.exists():
        raise FileNotFoundError(path)
    try:
        img = nib.load(str(path))
        voxels = np.asarray(img.get_fdata(dtype=np.float32))
        zooms = img.header.get_zooms()[:3]
    except Exception as exc:
        raise ParseError(f"cannot read NIfTI {path}: {exc}") from exc
    if voxels.ndim != 3:
        raise ParseError(f"{path} is not a 3D volume (shape {voxels.shape})")
    extra = {}
    side = sidecar_path(Path(str(path)[: -len(".gz")]) if path.name.endswith(".gz") else path)
    if side.exists():
        extra = _read_sidecar(side)
    modality = modality or extra.get("modality", "clinical")
    unit = extra.get("unit", "mm")
    return CTVolume(voxels, tuple(float(z) for z in zooms), modality, extra.get("id", _stem(path)), unit=unit,
                    meta=extra.get("meta", {}))


def _stem(path: Path) -> str:
    name = path.name
    for suf in (".nii.gz", ".nii", ".raw", ".bin"):
        if name.lower().endswith(suf):
            return name[: -len(suf)]
    return path.stem


def _read_sidecar(side: Path) -> dict:
    try:
        with open(side) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read sidecar {side}: {exc}") from exc


def _load_raw(path: Path, modality):
    side = sidecar_path(path)
    if not side.exists():
        raise ParseError(f"raw volume {path} has no sidecar {side.name}")
    info = _read_sidecar(side)
    try:
        shape = tuple(int(s) for s in info["shape"])
        spacing = tuple(float(s) for s in info["spacing"])
        unit = info.get("unit", "mm")
        dtype = info.get("dtype", "int16")
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"sidecar {side} is missing or has malformed fields: {exc}") from exc
    if dtype not in RAW_DTYPES or len(shape) != 3:
        raise ParseError(f"sidecar {side}: unsupported dtype {dtype!r} or shape {shape}")
    data = np.fromfile(path, dtype=np.dtype(dtype).newbyteorder("<"))
    if data.size != int(np.prod(shape)):
        raise ParseError(f"{path}: expected {int(np.prod(shape))} voxels, found {data.size}")
    imap = info.get("intensity_map")
    return CTVolume(
        data.reshape(shape).astype(np.float32),
        spacing,
        modality or info.get("modality", "clinical"),
        info.get("id", _stem(path)),
        unit=unit,
        intensity_map=IntensityMap(*imap) if imap else None,
        meta=info.get("meta", {}),
    )


def _atomic_write_bytes(path: Path, payload: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _sidecar_dict(vol: CTVolume, dtype: Optional[str] = None) -> dict:
    info = {
        "id": vol.id,
        "shape": list(vol.shape),
        "spacing": list(vol.spacing),
        "unit": vol.unit,
        "modality": vol.modality,
        "meta": vol.meta,
    }
    if dtype:
        info["dtype"] = dtype
    if vol.intensity_map is not None:
        info["intensity_map"] = [vol.intensity_map.lo, vol.intensity_map.hi]
    return info


def save_volume(vol: CTVolume, path, dtype: str = "int16") -> Path:
    """Write ``vol`` as NIfTI (float32) or raw little-endian + sidecar.

    Raw int16 output rounds voxel values; use ``dtype="float32"`` for
    normalized or super-resolved volumes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if _is_nifti(path):
        import nibabel as nib

        affine = np.diag([*vol.spacing, 1.0])
        img = nib.Nifti1Image(vol.voxels.astype(np.float32), affine)
        img.header.set_zooms(vol.spacing)
        nib.save(img, str(path))
        base = Path(str(path)[: -len(".gz")]) if path.name.endswith(".gz") else path
        _atomic_write_bytes(sidecar_path(base), json.dumps(_sidecar_dict(vol), indent=2).encode())
        return path
    if path.suffix.lower() not in RAW_SUFFIXES:
        raise FormatError(f"unrecognized volume format: {path.name}")
    if dtype not in RAW_DTYPES:
        raise ParameterError(f"raw dtype must be one of {RAW_DTYPES}")
    data = vol.voxels
    if dtype == "int16":
        data = np.clip(np.rint(data), -32768, 32767)
    _atomic_write_bytes(path, np.ascontiguousarray(data, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())
    _atomic_write_bytes(sidecar_path(path), json.dumps(_sidecar_dict(vol, dtype), indent=2).encode())
    return path
