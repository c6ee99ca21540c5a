#!/usr/bin/env python3
"""
🎯 ARH Norm - adaptive region harmonization of feature maps.

The module splits features by the (resized) lesion mask, normalizes each
region on its own voxels, and re-styles the foreground with scaling maps
built from background statistics and a learned spatial attention map:

    F_a          = sigmoid(fuse([max_c F, mean_c F, reduce(F)]))
    gamma, beta  = conv(F_a), conv(F_a)
    gamma_f      = conv(gamma + sigma),  beta_f = conv(beta + mu)
    F_hat        = norm(F_f) * (1 + gamma_f) + beta_f + norm(F_b)

mu / sigma are population statistics of the raw features over background
voxels. Regions that vanish (empty lesion or empty background, common at
coarse scales) fall back to whole-map statistics.

The batch / instance / rain variants exist for ablation runs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ArhnetError, DegenerateRegionError, ShapeError
from .layers import ConvParams, init_conv
from .tensor import (
    Tensor,
    as_tensor,
    batch_norm,
    concat,
    default_dtype,
    instance_norm,
    reduce_max,
    reduce_mean,
    reduce_sum,
    sigmoid,
    sqrt,
)
from .volume import Mask3D

logger = logging.getLogger(__name__)

NORM_KINDS = ("arh", "batch", "instance", "rain")
SPATIAL = (2, 3, 4)
_ARH_CONVS = ("attn_reduce", "attn_fuse", "gamma_conv", "beta_conv", "gamma_f_conv", "beta_f_conv")


@dataclass
class ArhParams:
    attn_reduce: ConvParams
    attn_fuse: ConvParams
    gamma_conv: ConvParams
    beta_conv: ConvParams
    gamma_f_conv: ConvParams
    beta_f_conv: ConvParams

    @property
    def channels(self):
        return self.attn_reduce.in_channels

    @staticmethod
    def shapes(channels):
        """(c_in, c_out) per conv for a host feature width C."""
        c = channels
        return {
            "attn_reduce": (c, 1),
            "attn_fuse": (3, 1),
            "gamma_conv": (1, c),
            "beta_conv": (1, c),
            "gamma_f_conv": (c, c),
            "beta_f_conv": (c, c),
        }

    @classmethod
    def init(cls, channels, rng, kernel=3, zero=False):
        convs = {
            name: init_conv(c_in, c_out, kernel, rng, zero=zero)
            for name, (c_in, c_out) in cls.shapes(channels).items()
        }
        return cls(**convs)

    @classmethod
    def from_params(cls, params, prefix):
        return cls(**{name: ConvParams.from_params(params, f"{prefix}.{name}") for name in _ARH_CONVS})

    def named_parameters(self, prefix):
        out = {}
        for name in _ARH_CONVS:
            out.update(getattr(self, name).named_parameters(f"{prefix}.{name}"))
        return out


@dataclass
class RegionStats:
    mu: Tensor
    sigma: Tensor


# --- masks ------------------------------------------------------------------

def mask_array(m):
    """Mask3D / bool array / tensor -> float (N, 1, H, W, D) array."""
    if isinstance(m, Tensor):
        array = m.data
    elif isinstance(m, Mask3D):
        array = m.data
    else:
        array = np.asarray(m)
    if array.ndim == 3:
        array = array[None, None]
    if array.ndim != 5 or array.shape[1] != 1:
        raise ShapeError(f"mask must be (H, W, D) or (N, 1, H, W, D), got {array.shape}")
    return array.astype(default_dtype())


def mask_resize(m, target_dims):
    """
    Nearest-neighbour downsampling by powers of two.

    Each coarse voxel takes the fine voxel with the smallest index in its block.
    """
    array = m.data if isinstance(m, Mask3D) else np.asarray(m)
    source = array.shape[-3:]
    target = tuple(int(t) for t in target_dims)
    factors = []
    for s, t in zip(source, target):
        ratio = s // t if t else 0
        if t < 1 or s % t or ratio & (ratio - 1):
            raise ShapeError(f"mask_resize: {source} -> {target} is not a power-of-two reduction")
        factors.append(ratio)
    resized = array[..., ::factors[0], ::factors[1], ::factors[2]]
    if isinstance(m, Mask3D):
        return Mask3D(resized, tuple(s * f for s, f in zip(m.spacing, factors)))
    return resized


def _check_mask(F, m):
    if m.shape[2:] != F.shape[2:] or m.shape[0] not in (1, F.shape[0]):
        raise ShapeError(f"mask {m.shape} does not match features {F.shape}")


# --- region operations ------------------------------------------------------

def split_regions(F, M):
    F = as_tensor(F)
    m = mask_array(M)
    _check_mask(F, m)
    return F * m, F * (1 - m)


def _region_stats(F, region, literal_sigma=False):
    count = np.maximum(region.sum(axis=SPATIAL, keepdims=True), 1)
    mu = reduce_sum(F * region, SPATIAL) / count
    if literal_sigma:
        deviation = F * region - mu
    else:
        deviation = (F - mu) * region
    sigma = sqrt(reduce_sum(deviation * deviation, SPATIAL) / count)
    return RegionStats(mu, sigma)


def background_stats(F, M, literal_sigma=False):
    """
    Channel-wise mean / std of F over background voxels, per sample.

    `literal_sigma` keeps the unmasked "- mu" term, so foreground voxels
    contribute mu^2 each to the variance sum.
    """
    F = as_tensor(F)
    m = mask_array(M)
    _check_mask(F, m)
    background = 1 - m
    if (background.sum(axis=SPATIAL) == 0).any():
        raise DegenerateRegionError("background region is empty; use whole-map statistics instead")
    return _region_stats(F, background, literal_sigma)


def region_instance_norm(F, region, eps=1e-5):
    """Instance norm with statistics over `region` voxels only; zero outside it."""
    F = as_tensor(F)
    count = np.maximum(region.sum(axis=SPATIAL, keepdims=True), 1)
    mean = reduce_sum(F * region, SPATIAL) / count
    deviation = (F - mean) * region
    variance = reduce_sum(deviation * deviation, SPATIAL) / count
    return deviation / sqrt(variance + eps)


def attention_map(F, p):
    F = as_tensor(F)
    f_max, f_avg = reduce_max(F, 1), reduce_mean(F, 1)
    return sigmoid(p.attn_fuse(concat([f_max, f_avg, p.attn_reduce(F)], axis=1)))


def scaling_params(F_a, p):
    if F_a.shape[1] != 1:
        raise ShapeError(f"attention map must have one channel, got {F_a.shape}")
    return p.gamma_conv(F_a), p.beta_conv(F_a)


def foreground_scaling(gamma, beta, stats, p):
    if stats.mu.shape[1] != gamma.shape[1]:
        raise ShapeError(f"stats have {stats.mu.shape[1]} channels, scaling maps {gamma.shape[1]}")
    return p.gamma_f_conv(gamma + stats.sigma), p.beta_f_conv(beta + stats.mu)


def _regions(F, M):
    m = mask_array(M)
    _check_mask(F, m)
    if m.shape[0] != F.shape[0]:
        m = np.repeat(m, F.shape[0], axis=0)
    has_fg = (m.sum(axis=SPATIAL, keepdims=True) > 0).astype(m.dtype)
    has_bg = ((1 - m).sum(axis=SPATIAL, keepdims=True) > 0).astype(m.dtype)
    # whole map for samples without background voxels
    stats_region = (1 - m) * has_bg + (1 - has_bg)
    return m, has_fg, stats_region


def arh_forward(F, M, p, eps=1e-5, literal_sigma=False):
    F = as_tensor(F)
    m, has_fg, stats_region = _regions(F, M)
    if not has_fg.all() or (stats_region == 1).all(axis=SPATIAL).any():
        logger.debug("ARH: degenerate region in batch, falling back to whole-map statistics")

    F_f, F_b = F * m, F * (1 - m)
    F_f_norm = region_instance_norm(F_f, m, eps)
    F_b_norm = region_instance_norm(F_b, 1 - m, eps)
    stats = _region_stats(F, stats_region, literal_sigma)

    F_a = attention_map(F, p)
    gamma, beta = scaling_params(F_a, p)
    gamma_f, beta_f = foreground_scaling(gamma, beta, stats, p)
    return F_f_norm * (1 + gamma_f) + beta_f * has_fg + F_b_norm


def baseline_norm(kind, F, M=None, eps=1e-5, literal_sigma=False):
    F = as_tensor(F)
    if kind == "batch":
        return batch_norm(F, eps)
    if kind == "instance":
        return instance_norm(F, eps)
    if kind != "rain":
        raise ArhnetError(f"unknown normalization '{kind}' (expected one of {NORM_KINDS})")

    m, has_fg, stats_region = _regions(F, M)
    F_f, F_b = F * m, F * (1 - m)
    stats = _region_stats(F, stats_region, literal_sigma)
    aligned = region_instance_norm(F_f, m, eps) * stats.sigma + stats.mu + F_b
    if has_fg.all():
        return aligned
    # samples without lesion voxels get plain instance norm
    return aligned * has_fg + instance_norm(F, eps) * (1 - has_fg)


class NormLayer:
    """One normalization slot of the generator, parameterised by kind."""

    def __init__(self, kind, params=None, eps=1e-5, literal_sigma=False):
        if kind not in NORM_KINDS:
            raise ArhnetError(f"unknown normalization '{kind}' (expected one of {NORM_KINDS})")
        if kind == "arh" and params is None:
            raise ArhnetError("ARH normalization needs ArhParams")
        self.kind = kind
        self.params = params
        self.eps = eps
        self.literal_sigma = literal_sigma

    def __call__(self, F, M):
        if self.kind == "arh":
            return arh_forward(F, M, self.params, self.eps, self.literal_sigma)
        return baseline_norm(self.kind, F, M, self.eps, self.literal_sigma)
