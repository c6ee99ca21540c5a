"""
Non-learned harmonizers: the raw composite and histogram matching.

Histogram matching remaps foreground intensities so their CDF follows the
CDF of a reference region: the shell dilate(M, r) AND NOT M ("local"), or
the whole background ("global"). Both histograms share `bins` bins over
the union of the two ranges. A voxel's source level is the mid-rank of
its bin, so a constant foreground sits at level 0.5 and maps to the
reference median; the reference quantile is read off the binned CDF with
linear interpolation inside each bin.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy import ndimage

from .errors import PreconditionError
from .volume import _check_same_dims

logger = logging.getLogger(__name__)

REFERENCES = ("local", "global")
SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def composite_identity(I):
    return I


def reference_region(M, context_radius=8, reference="local"):
    mask = M.data
    if reference == "global":
        return ~mask
    if reference != "local":
        raise PreconditionError(f"histogram reference must be one of {REFERENCES}, got '{reference}'")
    if not mask.any():
        return np.zeros_like(mask)
    return ndimage.binary_dilation(mask, SIX_CONNECTED, iterations=context_radius) & ~mask


def _reference_quantile(levels, cdf, edges):
    """Inverse of the piecewise-linear reference CDF at `levels` in (0, 1]."""
    k = np.clip(np.searchsorted(cdf, levels, side="left"), 1, len(edges) - 1)
    lo, hi = cdf[k - 1], cdf[k]
    frac = np.where(hi > lo, (levels - lo) / np.where(hi > lo, hi - lo, 1.0), 1.0)
    return edges[k - 1] + np.clip(frac, 0.0, 1.0) * (edges[k] - edges[k - 1])


def histogram_match(I, M, bins=256, context_radius=8, reference="local"):
    _check_same_dims(I, M, "image and mask")
    mask = M.data
    if not mask.any():
        raise PreconditionError("histogram matching needs a non-empty lesion mask")
    region = reference_region(M, context_radius, reference)
    if not region.any():
        raise PreconditionError(
            f"reference region is empty; increase context_radius (now {context_radius}) or use the global reference")

    data = I.data.astype(np.float64)
    source, target = data[mask], data[region]
    lo = min(source.min(), target.min())
    hi = max(source.max(), target.max())
    if hi == lo:
        return I
    edges = np.linspace(lo, hi, bins + 1)

    src_counts, _ = np.histogram(source, edges)
    src_cum = np.cumsum(src_counts)
    mid_rank = (src_cum - src_counts / 2.0) / source.size
    src_bin = np.clip(np.searchsorted(edges, source, side="right") - 1, 0, bins - 1)
    levels = mid_rank[src_bin]

    ref_counts, _ = np.histogram(target, edges)
    ref_cdf = np.concatenate([[0.0], np.cumsum(ref_counts) / target.size])
    mapped = _reference_quantile(levels, ref_cdf, edges)
    mapped = np.clip(mapped, target.min(), target.max())

    out = I.data.copy()
    out[mask] = mapped.astype(np.float32)
    logger.debug(f"Histogram matching: {source.size} foreground voxels vs {target.size} reference voxels")
    return I.with_data(out)
