#!/usr/bin/env python3
"""
📂 Dataset - paired image/mask cases, patch sampling and synthetic data.

Layout on disk:

    <root>/images/<stem>.nii | <stem>.bin + <stem>.json
    <root>/masks/<same file name>

Every random draw for a training sample comes from its own stream seeded
with (seed, epoch, index), so batches do not depend on thread scheduling.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import EmptyDatasetError, VolumeIOError
from .volume import (
    Mask3D,
    Volume3D,
    extract_patch,
    load_mask,
    load_volume,
    normalize_intensity,
    save_mask,
    save_volume,
)

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".nii", ".bin")
SHUFFLE_STREAM = 0
SAMPLE_STREAM = 1
PROBE_STREAM = 2


@dataclass(frozen=True)
class Case:
    name: str
    image: Volume3D
    mask: Mask3D


def stream_rng(seed, *keys):
    """Independent generator for the stream identified by (seed, *keys)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


def sample_rng(seed, epoch, index):
    return stream_rng(seed, SAMPLE_STREAM, epoch, index)


def list_case_files(root):
    root = Path(root)
    images_dir, masks_dir = root / "images", root / "masks"
    if not images_dir.is_dir():
        raise EmptyDatasetError(f"no images/ directory under {root}")
    pairs = []
    for image_path in sorted(p for p in images_dir.iterdir() if p.suffix in IMAGE_SUFFIXES):
        mask_path = masks_dir / image_path.name
        if not mask_path.exists():
            logger.warning(f"⚠️ {image_path.name}: no matching mask in {masks_dir}, skipped")
            continue
        pairs.append((image_path.stem, image_path, mask_path))
    return pairs


def load_case(name, image_path, mask_path, normalize=True):
    image = load_volume(image_path)
    mask = load_mask(mask_path)
    if mask.dims != image.dims:
        raise VolumeIOError(f"mask dims {mask.dims} differ from image dims {image.dims}", mask_path)
    if normalize:
        image = normalize_intensity(image)
    return Case(name, image, Mask3D(mask.data, image.spacing))


def load_dataset(root, max_lesion_voxels=0, normalize=True):
    """
    Load every case under `root`.

    Cases without lesion voxels are skipped; with `max_lesion_voxels`
    > 0 only lesions up to that size are kept.
    """
    cases = []
    for name, image_path, mask_path in list_case_files(root):
        case = load_case(name, image_path, mask_path, normalize)
        count = case.mask.count
        if count == 0:
            logger.warning(f"⚠️ {name}: empty lesion mask, skipped")
            continue
        if max_lesion_voxels and count > max_lesion_voxels:
            logger.info(f"{name}: lesion of {count} voxels above {max_lesion_voxels}, filtered out")
            continue
        cases.append(case)
    if not cases:
        raise EmptyDatasetError(f"no usable image/mask pairs under {root}")
    logger.info(f"📂 Loaded {len(cases)} case(s) from {root}")
    return cases


def save_case(root, case, format="rawf32"):
    suffix = ".nii" if format == "nifti1" else ".bin"
    save_volume(case.image, Path(root) / "images" / f"{case.name}{suffix}", format)
    save_mask(case.mask, Path(root) / "masks" / f"{case.name}{suffix}", format)


# --- patch batches ----------------------------------------------------------

class PatchLoader:
    """
    Lesion patches for training, one per case per epoch.

    `batch(epoch, step)` returns (images, masks, rngs): (B, 1, p, p, p)
    float32 and bool arrays plus the per-sample generators, already
    advanced past the patch draw so callers can keep sampling from them.
    """

    def __init__(self, cases, patch_size, batch_size, seed, threads=1):
        if not cases:
            raise EmptyDatasetError("PatchLoader needs at least one case")
        self.cases = cases
        self.size = (patch_size,) * 3
        self.batch_size = batch_size
        self.seed = seed
        self.threads = threads
        self._order = {}

    @property
    def steps_per_epoch(self):
        return -(-len(self.cases) // self.batch_size)

    def order(self, epoch):
        if epoch not in self._order:
            self._order = {epoch: stream_rng(self.seed, SHUFFLE_STREAM, epoch).permutation(len(self.cases))}
        return self._order[epoch]

    def _sample(self, epoch, position, case_index):
        rng = sample_rng(self.seed, epoch, position)
        case = self.cases[case_index]
        image, mask, _ = extract_patch(case.image, case.mask, self.size, rng)
        return image.data, mask.data, rng

    def batch(self, epoch, step):
        order = self.order(epoch)
        positions = range(step * self.batch_size, min((step + 1) * self.batch_size, len(order)))
        jobs = [(epoch, pos, int(order[pos])) for pos in positions]
        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                samples = list(pool.map(lambda job: self._sample(*job), jobs))
        else:
            samples = [self._sample(*job) for job in jobs]
        images = np.stack([s[0] for s in samples])[:, None]
        masks = np.stack([s[1] for s in samples])[:, None]
        return images, masks, [s[2] for s in samples]


def probe_batch(cases, patch_size, seed, count):
    """Fixed held-out patches (images, masks, rngs) for periodic evaluation."""
    images, masks, rngs = [], [], []
    for index, case in enumerate(cases[:count]):
        rng = stream_rng(seed, PROBE_STREAM, index)
        image, mask, _ = extract_patch(case.image, case.mask, (patch_size,) * 3, rng)
        images.append(image.data)
        masks.append(mask.data)
        rngs.append(rng)
    return np.stack(images)[:, None], np.stack(masks)[:, None], rngs


# --- synthetic data ---------------------------------------------------------

def synth_case(name, size, rng):
    """
    Smooth low-frequency noise background with one ellipsoid lesion whose
    intensity is offset from the surrounding tissue.
    """
    field = gaussian_filter(rng.standard_normal((size,) * 3), sigma=size / 6.0, mode="wrap")
    field = (field - field.min()) / max(field.max() - field.min(), 1e-12)
    background = 0.3 + 0.4 * field

    radii = rng.uniform(2.0, max(2.5, size / 6.0), size=3)
    margin = np.ceil(radii).astype(int) + 1
    half = (size - 1) / 2.0
    center = np.array([rng.uniform(min(m, half), max(size - 1 - m, half)) for m in margin])
    grid = np.stack(np.meshgrid(*(np.arange(size),) * 3, indexing="ij"), axis=-1)
    lesion = (((grid - center) / radii) ** 2).sum(axis=-1) <= 1.0
    if not lesion.any():
        lesion[tuple(np.round(center).astype(int))] = True

    offset = rng.choice([-1.0, 1.0]) * rng.uniform(0.15, 0.3)
    data = np.where(lesion, np.clip(background + offset, 0.0, 1.0), background)
    return Case(name, Volume3D(data.astype(np.float32)), Mask3D(lesion))


def write_synth_dataset(out_dir, n=8, size=24, seed=0, n_test=0, format="rawf32"):
    """Write `n` training cases (and `n_test` test cases under test/)."""
    out_dir = Path(out_dir)
    splits = [("train", n)] + ([("test", n_test)] if n_test else [])
    written = {}
    for split_index, (split, count) in enumerate(splits):
        root = out_dir / split
        for index in range(count):
            case = synth_case(f"case{index:03d}", size, stream_rng(seed, 100 + split_index, index))
            save_case(root, case, format)
        written[split] = root
        logger.info(f"✅ Wrote {count} synthetic case(s) to {root}")
    return written
