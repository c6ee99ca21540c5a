#!/usr/bin/env python3
"""
🎲 Augment - lesion-aware augmentation.

- Foreground intensity perturbation: (1 + alpha) * I + lambda inside the
  mask, clamped to [0, 1]; background untouched.
- Boundary band: dilate(M, r) AND NOT erode(M, r) with the 6-connected
  element applied r times.
- Copy-Paste: hard paste of a donor lesion into a host scan at a uniformly
  sampled offset.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import PlacementError, PreconditionError
from .volume import Mask3D, _check_same_dims

logger = logging.getLogger(__name__)

PERTURB_RANGE = 0.3
SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class Perturbation:
    alpha: float = 0.0
    lam: float = 0.0


@dataclass(frozen=True)
class PlacementPolicy:
    max_attempts: int = 100
    allow_overlap: bool = False
    host_region: Mask3D | None = None

    def __post_init__(self):
        if self.max_attempts < 1:
            raise PreconditionError(f"max_attempts must be >= 1, got {self.max_attempts}")


def sample_perturbation(rng, limit=PERTURB_RANGE):
    """alpha and lambda drawn independently from U(-limit, limit)."""
    alpha = float(rng.uniform(-limit, limit))
    lam = float(rng.uniform(-limit, limit))
    return Perturbation(alpha, lam)


def perturb_array(image, mask, p):
    """Array form of `perturb_foreground`; shapes must match, any rank."""
    image = np.asarray(image, dtype=np.float32)
    if image.shape != np.shape(mask):
        raise PreconditionError(f"image {image.shape} and mask {np.shape(mask)} differ")
    shifted = np.float32(1.0 + p.alpha) * image + np.float32(p.lam)
    return np.where(mask, np.clip(shifted, 0.0, 1.0), image).astype(np.float32)


def perturb_foreground(I, M, p):
    _check_same_dims(I, M, "image and mask")
    return I.with_data(perturb_array(I.data, M.data, p))


def extract_boundary(M, radius=2):
    if radius < 1:
        raise PreconditionError(f"boundary radius must be >= 1, got {radius}")
    data = M.data if isinstance(M, Mask3D) else np.asarray(M, dtype=bool)
    if not data.any():
        band = np.zeros_like(data)
    else:
        # volume border acts as background for both operations
        dilated = ndimage.binary_dilation(data, SIX_CONNECTED, iterations=radius)
        eroded = ndimage.binary_erosion(data, SIX_CONNECTED, iterations=radius, border_value=0)
        band = dilated & ~eroded
    if isinstance(M, Mask3D):
        return Mask3D(band, M.spacing)
    return band


def _bounding_box(mask):
    coords = np.argwhere(mask)
    lo = coords.min(axis=0)
    hi = coords.max(axis=0) + 1
    return tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))


def copy_paste(host, host_mask, donor, donor_mask, policy, rng):
    """
    Paste the donor lesion voxels into the host.

    Returns the composite volume and host_mask OR the pasted mask.
    Raises PlacementError after `policy.max_attempts` rejected offsets.
    """
    _check_same_dims(host, host_mask, "host and host mask")
    _check_same_dims(donor, donor_mask, "donor and donor mask")
    if not donor_mask.data.any():
        raise PreconditionError("donor mask has no foreground voxel")

    box = _bounding_box(donor_mask.data)
    patch_mask = donor_mask.data[box]
    patch_values = donor.data[box]
    size = patch_mask.shape
    if any(s > d for s, d in zip(size, host.dims)):
        raise PreconditionError(f"donor lesion box {size} does not fit host dims {host.dims}")
    region = policy.host_region
    if region is not None:
        _check_same_dims(host, region, "host and host region")

    n_offsets = tuple(d - s + 1 for d, s in zip(host.dims, size))
    for attempt in range(policy.max_attempts):
        offset = tuple(int(rng.integers(n)) for n in n_offsets)
        window = tuple(slice(o, o + s) for o, s in zip(offset, size))
        if region is not None and not region.data[window][patch_mask].all():
            continue
        if not policy.allow_overlap and host_mask.data[window][patch_mask].any():
            continue

        data = host.data.copy()
        data[window][patch_mask] = patch_values[patch_mask]
        mask = host_mask.data.copy()
        mask[window] |= patch_mask
        logger.debug(f"Copy-Paste: offset {offset} after {attempt + 1} attempt(s)")
        return host.with_data(data), Mask3D(mask, host_mask.spacing)

    raise PlacementError(f"no valid placement for a {size} lesion box in {policy.max_attempts} attempts")


def composite_stream(cases, count, policy, rng, max_donor_retries=10):
    """
    Yield `count` Copy-Paste composites drawn from `cases`.

    Each composite uses a random host and a random donor; a failed
    placement retries with a new donor. Yields (host_name, donor_name,
    image, mask).
    """
    if not cases:
        raise PreconditionError("composite_stream needs at least one case")
    for n in range(count):
        host_name, host, host_mask = cases[int(rng.integers(len(cases)))]
        for retry in range(max_donor_retries):
            donor_name, donor, donor_mask = cases[int(rng.integers(len(cases)))]
            try:
                image, mask = copy_paste(host, host_mask, donor, donor_mask, policy, rng)
            except (PlacementError, PreconditionError) as exc:
                logger.info(f"⚠️ Composite {n}: donor {donor_name} rejected ({exc}), retrying")
                continue
            yield host_name, donor_name, image, mask
            break
        else:
            raise PlacementError(f"composite {n}: no donor could be placed into {host_name}")
