#!/usr/bin/env python3
"""
📏 Metrics - harmonization fidelity and segmentation overlap.

Harmonization: MAE / PSNR over the whole volume, fMAE / fPSNR over the
lesion mask (peak 1.0, PSNR capped at 99 dB).

Segmentation: Dice (1 when both masks are empty), and surface distances
between 6-connected surfaces in mm. ASD is the mean and HD95 the linearly
interpolated 95th percentile of the combined two-way distance set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import PreconditionError, UndefinedMetricError

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class HarmonizationReport:
    mae: float
    fmae: float
    psnr_db: float
    fpsnr_db: float

    def row(self):
        return [self.mae, self.fmae, self.psnr_db, self.fpsnr_db]


@dataclass(frozen=True)
class SegmentationReport:
    dice: float
    asd_mm: float | None
    hd95_mm: float | None

    def row(self):
        return [self.dice, self.asd_mm, self.hd95_mm]


def _array(x):
    return np.asarray(getattr(x, "data", x))


def _region_values(I, I_hat, region):
    a, b = _array(I).astype(np.float64), _array(I_hat).astype(np.float64)
    if a.shape != b.shape:
        raise PreconditionError(f"compared volumes differ in shape: {a.shape} vs {b.shape}")
    if region is None:
        return a.ravel(), b.ravel()
    keep = _array(region).astype(bool)
    if keep.shape != a.shape:
        raise PreconditionError(f"region {keep.shape} does not match volumes {a.shape}")
    if not keep.any():
        raise PreconditionError("metric region is empty")
    return a[keep], b[keep]


def mae(I, I_hat, region=None):
    a, b = _region_values(I, I_hat, region)
    return float(np.mean(np.abs(a - b)))


def psnr(I, I_hat, region=None, peak=1.0, cap=PSNR_CAP):
    a, b = _region_values(I, I_hat, region)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return cap
    return min(float(10.0 * np.log10(peak ** 2 / mse)), cap)


def harmonization_report(I, I_hat, mask):
    return HarmonizationReport(
        mae=mae(I, I_hat),
        fmae=mae(I, I_hat, mask),
        psnr_db=psnr(I, I_hat),
        fpsnr_db=psnr(I, I_hat, mask),
    )


def dice(A, B):
    a, b = _array(A).astype(bool), _array(B).astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def surface(mask):
    """Foreground voxels with at least one background 6-neighbour (border counts as background)."""
    mask = _array(mask).astype(bool)
    return mask & ~ndimage.binary_erosion(mask, SIX_CONNECTED, border_value=0)


def surface_distances(A, B, spacing=None):
    """Sorted surface distances A -> B and B -> A, in mm."""
    spacing = spacing or getattr(A, "spacing", (1.0, 1.0, 1.0))
    surf_a, surf_b = surface(A), surface(B)
    if not surf_a.any() or not surf_b.any():
        raise UndefinedMetricError("surface distance is undefined for an empty mask")
    to_b = ndimage.distance_transform_edt(~surf_b, sampling=spacing)
    to_a = ndimage.distance_transform_edt(~surf_a, sampling=spacing)
    return np.sort(np.concatenate([to_b[surf_a], to_a[surf_b]]))


def asd(A, B, spacing=None):
    return float(np.mean(surface_distances(A, B, spacing)))


def hd95(A, B, spacing=None):
    return float(np.percentile(surface_distances(A, B, spacing), 95))


def segmentation_report(pred, gt, spacing=None):
    try:
        distances = surface_distances(pred, gt, spacing)
        asd_mm, hd95_mm = float(np.mean(distances)), float(np.percentile(distances, 95))
    except UndefinedMetricError as exc:
        logger.warning(f"⚠️ {exc}")
        asd_mm = hd95_mm = None
    return SegmentationReport(dice(pred, gt), asd_mm, hd95_mm)
