"""Lung segmentation and per-modality intensity normalization."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.morphology import ball

from ..errors import NormalizationError, SegmentationError
from .volumes import CTVolume, IntensityMap

CLINICAL_THRESHOLD = -400.0
CLOSING_RADIUS = 2
KEEP_COMPONENTS = 2
PERCENTILES = (0.5, 99.5)


@dataclass
class LungMask:
    mask: np.ndarray
    source_id: str

    @property
    def shape(self):
        return self.mask.shape

    def fraction(self) -> float:
        return float(self.mask.mean())


def _clear_inplane_border(binary: np.ndarray) -> np.ndarray:
    """Drop 6-connected components touching the row/column faces (outside air)."""
    labels, n = ndimage.label(binary)
    if n == 0:
        return binary
    edge = np.zeros(n + 1, dtype=bool)
    for face in (labels[0], labels[-1], labels[:, 0], labels[:, -1]):
        edge[np.unique(face)] = True
    edge[0] = True
    return ~edge[labels]


def _keep_largest(binary: np.ndarray, k: int) -> np.ndarray:
    labels, n = ndimage.label(binary)
    if n <= k:
        return binary
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    keep = np.argsort(sizes)[::-1][:k]
    return np.isin(labels, keep)


def segment_lung(vol: CTVolume, threshold: Optional[float] = None) -> LungMask:
    """Threshold, close, fill holes and keep the two largest components.

    Clinical volumes are thresholded below -400 (calibrated units) and the
    surrounding air is removed; micro volumes of resected specimens keep the
    voxels above an Otsu threshold of the lightly smoothed volume.
    """
    v = np.asarray(vol.voxels, dtype=np.float32)
    if vol.modality == "clinical":
        thr = CLINICAL_THRESHOLD if threshold is None else threshold
        binary = _clear_inplane_border(v < thr)
    else:
        smooth = ndimage.gaussian_filter(v, 1.0)
        if threshold is None:
            if np.ptp(smooth) == 0:
                raise SegmentationError(f"volume {vol.id!r} is uniform")
            threshold = threshold_otsu(smooth.ravel())
        binary = smooth > threshold
    if binary.any():
        pad = CLOSING_RADIUS
        padded = np.pad(binary, pad)
        closed = ndimage.binary_closing(padded, structure=ball(CLOSING_RADIUS))
        binary = closed[pad:-pad, pad:-pad, pad:-pad]
        # 2D fill: lumens crossing the whole stack are open in 3D
        for k in range(binary.shape[2]):
            binary[:, :, k] = ndimage.binary_fill_holes(binary[:, :, k])
        binary = _keep_largest(binary, KEEP_COMPONENTS)
    if not binary.any():
        raise SegmentationError(f"empty lung mask for volume {vol.id!r}")
    return LungMask(binary, vol.id)


def intensity_map(vol: CTVolume, mask: Optional[LungMask] = None) -> IntensityMap:
    v = vol.voxels if mask is None else vol.voxels[mask.mask]
    if v.size == 0:
        raise NormalizationError(f"no voxels to normalize in {vol.id!r}")
    lo, hi = np.percentile(v.astype(np.float64), PERCENTILES)
    if not hi > lo:
        raise NormalizationError(f"degenerate intensity range [{lo}, {hi}] in {vol.id!r}")
    return IntensityMap(float(lo), float(hi))


def normalize(vol: CTVolume, mask: Optional[LungMask] = None, imap: Optional[IntensityMap] = None) -> CTVolume:
    """Clip to the in-mask [0.5, 99.5] percentile range and map affinely to [-1, 1]."""
    imap = imap or intensity_map(vol, mask)
    out = imap.forward(vol.voxels.astype(np.float64))
    return vol.with_voxels(out, intensity_map=imap)


def denormalize(vol: CTVolume) -> CTVolume:
    if vol.intensity_map is None:
        raise NormalizationError(f"volume {vol.id!r} carries no intensity map")
    out = vol.intensity_map.inverse(vol.voxels)
    return vol.with_voxels(out, intensity_map=None)
