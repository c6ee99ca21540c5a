#!/usr/bin/env python3
"""
🏗️ Networks - generator G and discriminator D.

G is a small UNet: two 3x3x3 convs + leaky-relu per encoder level,
avg-pool down, nearest-neighbour up, skip concat, and a normalization
slot (ARH by default, with the mask resized to that scale) after each
decoder conv. A zero-initialized 1x1x1 conv predicts the intensity
difference map, added to the input inside the mask only:

    I_hat = clamp01(I_tilde + diff * M)

D is a patch critic over concat(candidate, I_tilde, M): stride-2 conv
stages with leaky-relu, a final 1-channel conv, spatial mean as score.

Parameters live in flat dicts keyed by stable dotted names, e.g.
`enc0.conv1.weight`, `dec0.norm2.gamma_conv.bias`, `out.conv.weight`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .arh_norm import NORM_KINDS, ArhParams, NormLayer, mask_resize
from .errors import PreconditionError, ShapeError
from .layers import ConvParams, init_conv
from .tensor import (
    as_batch,
    avg_pool,
    clamp,
    concat,
    leaky_relu,
    reduce_mean,
    upsample_nearest,
)
from .volume import Mask3D, PatchSpec, insert_patch

logger = logging.getLogger(__name__)

SLOPE = 0.2


@dataclass(frozen=True)
class GeneratorConfig:
    levels: int = 3
    base_channels: int = 16
    norm_kind: str = "arh"
    mask_input: bool = True
    literal_sigma: bool = False
    norm_eps: float = 1e-5
    out_channels: int = 1

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1:
            raise PreconditionError(f"levels and base_channels must be >= 1, got {self}")
        if self.norm_kind not in NORM_KINDS:
            raise PreconditionError(f"norm_kind must be one of {NORM_KINDS}, got '{self.norm_kind}'")

    @property
    def in_channels(self):
        return 2 if self.mask_input else 1

    def channels(self, level):
        return self.base_channels * 2 ** level


@dataclass(frozen=True)
class DiscriminatorConfig:
    layers: int = 4
    base_channels: int = 16
    in_channels: int = 3

    def __post_init__(self):
        if self.layers < 1 or self.base_channels < 1:
            raise PreconditionError(f"layers and base_channels must be >= 1, got {self}")

    def channels(self, stage):
        return self.base_channels * 2 ** min(stage, 3)


@dataclass
class ModelParams:
    generator: dict
    discriminator: dict

    def named(self):
        out = {f"G.{k}": v for k, v in self.generator.items()}
        out.update({f"D.{k}": v for k, v in self.discriminator.items()})
        return out

    @classmethod
    def from_named(cls, named):
        generator = {k[2:]: v for k, v in named.items() if k.startswith("G.")}
        discriminator = {k[2:]: v for k, v in named.items() if k.startswith("D.")}
        return cls(generator, discriminator)


# --- initialization ---------------------------------------------------------

def init_generator(config, rng, zero_output=True):
    params = {}
    c_prev = config.in_channels
    for level in range(config.levels):
        c = config.channels(level)
        params.update(init_conv(c_prev, c, 3, rng).named_parameters(f"enc{level}.conv1"))
        params.update(init_conv(c, c, 3, rng).named_parameters(f"enc{level}.conv2"))
        c_prev = c
    for level in reversed(range(config.levels - 1)):
        c = config.channels(level)
        params.update(init_conv(config.channels(level + 1) + c, c, 3, rng).named_parameters(f"dec{level}.conv1"))
        params.update(init_conv(c, c, 3, rng).named_parameters(f"dec{level}.conv2"))
        if config.norm_kind == "arh":
            for k in (1, 2):
                params.update(ArhParams.init(c, rng).named_parameters(f"dec{level}.norm{k}"))
    out = init_conv(config.channels(0), config.out_channels, 1, rng, zero=zero_output)
    params.update(out.named_parameters("out.conv"))
    for name, tensor in params.items():
        tensor.name = name
    return params


def init_discriminator(config, rng):
    params = {}
    c_prev = config.in_channels
    for stage in range(config.layers):
        c = config.channels(stage)
        params.update(init_conv(c_prev, c, 3, rng).named_parameters(f"stage{stage}.conv"))
        c_prev = c
    params.update(init_conv(c_prev, 1, 3, rng).named_parameters("score.conv"))
    for name, tensor in params.items():
        tensor.name = name
    return params


def init_params(g_config, d_config, rng, zero_output=True):
    """Conv weights ~ U(-a, a), a = sqrt(1 / fan_in); biases zero; G's output conv zero."""
    generator = init_generator(g_config, rng, zero_output)
    discriminator = init_discriminator(d_config, rng)
    logger.debug(f"Initialized G ({len(generator)} tensors) and D ({len(discriminator)} tensors)")
    return ModelParams(generator, discriminator)


# --- forward passes ---------------------------------------------------------

def _mask_batch(mask):
    array = np.asarray(getattr(mask, "data", mask))
    if array.ndim == 3:
        array = array[None, None]
    return array.astype(bool)


def _check_patch(spatial, levels):
    factor = 2 ** (levels - 1)
    if any(s % factor for s in spatial):
        raise ShapeError(f"patch dims {tuple(spatial)} not divisible by 2^(levels-1) = {factor}")


def _norm_layer(params, config, prefix):
    arh = ArhParams.from_params(params, prefix) if config.norm_kind == "arh" else None
    return NormLayer(config.norm_kind, arh, config.norm_eps, config.literal_sigma)


def generator_forward(image, mask, params, config):
    """
    Returns (diff, I_hat) as (N, 1, H, W, D) tensors.

    Background voxels of I_hat equal the input exactly for any parameters.
    """
    x_in = as_batch(image)
    m = _mask_batch(mask)
    if m.shape[2:] != x_in.shape[2:]:
        raise ShapeError(f"generator: mask {m.shape} vs image {x_in.shape}")
    _check_patch(x_in.shape[2:], config.levels)
    if m.shape[0] != x_in.shape[0]:
        m = np.broadcast_to(m, x_in.shape[:1] + m.shape[1:])
    m_float = m.astype(x_in.dtype)

    x = concat([x_in, m_float], axis=1) if config.mask_input else x_in
    skips = []
    for level in range(config.levels):
        if level:
            x = avg_pool(x)
        x = leaky_relu(ConvParams.from_params(params, f"enc{level}.conv1")(x), SLOPE)
        x = leaky_relu(ConvParams.from_params(params, f"enc{level}.conv2")(x), SLOPE)
        skips.append(x)

    for level in reversed(range(config.levels - 1)):
        x = concat([upsample_nearest(x), skips[level]], axis=1)
        m_level = mask_resize(m, x.shape[2:])
        for k in (1, 2):
            x = ConvParams.from_params(params, f"dec{level}.conv{k}")(x)
            x = _norm_layer(params, config, f"dec{level}.norm{k}")(x, m_level)
            x = leaky_relu(x, SLOPE)

    diff = ConvParams.from_params(params, "out.conv")(x)
    return diff, clamp(x_in + diff * m_float, 0.0, 1.0)


def discriminator_forward(candidate, image, mask, params, config=None):
    """Per-sample critic score, shape (N, 1, 1, 1, 1), unbounded."""
    candidate, image = as_batch(candidate), as_batch(image)
    m = _mask_batch(mask).astype(image.dtype)
    if candidate.shape != image.shape or m.shape[2:] != image.shape[2:]:
        raise ShapeError(f"discriminator: candidate {candidate.shape}, image {image.shape}, mask {m.shape}")
    if m.shape[0] != image.shape[0]:
        m = np.broadcast_to(m, image.shape).copy()

    x = concat([candidate, image, m], axis=1)
    stage = 0
    while f"stage{stage}.conv.weight" in params:
        conv = ConvParams.from_params(params, f"stage{stage}.conv", stride=2, padding=1)
        x = leaky_relu(conv(x), SLOPE)
        stage += 1
    x = ConvParams.from_params(params, "score.conv", padding=1)(x)
    return reduce_mean(x, (2, 3, 4))


# --- whole-volume harmonization ---------------------------------------------

def detached(params):
    return {name: tensor.detach() for name, tensor in params.items()}


def harmonize_patch(image, mask, params, config):
    """Single patch Volume3D / Mask3D -> harmonized Volume3D."""
    _, I_hat = generator_forward(image, mask, detached(params), config)
    return image.with_data(I_hat.data[0, 0])


def tile_origins(mask, size):
    """Window origins covering the lesion bounding box, clamped inside the volume."""
    coords = np.argwhere(mask.data)
    if not len(coords):
        return []
    lo, hi = coords.min(axis=0), coords.max(axis=0) + 1
    per_axis = []
    for a, b, s, d in zip(lo, hi, size, mask.dims):
        starts = range(int(a), int(b), s)
        per_axis.append(sorted({min(max(start, 0), d - s) for start in starts}))
    return [(i, j, k) for i in per_axis[0] for j in per_axis[1] for k in per_axis[2]]


def harmonize_volume(image, mask, params, config, patch_size):
    """
    Run G over windows tiling the lesion bounding box and reassemble.

    Every window reads the original composite; windows are written in
    order, so overlaps take the later window.
    """
    size = (patch_size,) * 3 if np.isscalar(patch_size) else tuple(patch_size)
    if any(s > d for s, d in zip(size, image.dims)):
        raise PreconditionError(f"volume {image.dims} is smaller than the model patch {size}")
    origins = tile_origins(mask, size)
    if not origins:
        logger.warning("⚠️ Empty lesion mask: nothing to harmonize")
        return image
    weights = detached(params)
    result = image
    for origin in origins:
        spec = PatchSpec(origin, size)
        window = spec.slices
        patch = image.with_data(image.data[window])
        _, I_hat = generator_forward(patch, Mask3D(mask.data[window], mask.spacing), weights, config)
        result = insert_patch(result, image.with_data(I_hat.data[0, 0]), spec)
    logger.info(f"✅ Harmonized {len(origins)} window(s) of size {size}")
    return result
