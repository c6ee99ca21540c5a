"""
Training losses: reconstruction L1, boundary-aware total variation,
hinge adversarial terms and their weighted total.

Every loss takes Tensors (or plain arrays) and returns a scalar Tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError, ShapeError
from .tensor import (
    Tensor,
    absolute,
    as_batch,
    as_tensor,
    forward_diff,
    reduce_mean,
    reduce_sum,
    relu,
)

REDUCTIONS = ("mean", "sum")
HINGE_CONVENTIONS = ("inverted", "standard")


@dataclass(frozen=True)
class LossWeights:
    w_rec: float = 100.0
    w_btv: float = 10.0
    w_adv: float = 1.0

    def __post_init__(self):
        if min(self.w_rec, self.w_btv, self.w_adv) < 0:
            raise PreconditionError(f"loss weights must be >= 0, got {self}")


def _check_reduction(reduction):
    if reduction not in REDUCTIONS:
        raise PreconditionError(f"loss reduction must be one of {REDUCTIONS}, got '{reduction}'")


def loss_rec(I, I_hat, reduction="mean"):
    """L1 between target and harmonized image."""
    _check_reduction(reduction)
    I, I_hat = as_batch(I), as_batch(I_hat)
    if I.shape != I_hat.shape:
        raise ShapeError(f"loss_rec: target {I.shape} vs output {I_hat.shape}")
    error = absolute(I - I_hat)
    return reduce_mean(error) if reduction == "mean" else reduce_sum(error)


def loss_btv(I_hat, boundary, reduction="mean"):
    """
    Forward-difference L1 over the boundary band.

    Neighbours past the last slice contribute 0. The mean form divides
    by the band voxel count; an empty band gives 0.
    """
    _check_reduction(reduction)
    I_hat = as_batch(I_hat)
    band = np.asarray(getattr(boundary, "data", boundary), dtype=bool)
    if band.ndim == 3:
        band = band[None, None]
    if band.shape[2:] != I_hat.shape[2:] or band.shape[0] not in (1, I_hat.shape[0]):
        raise ShapeError(f"loss_btv: boundary {band.shape} vs image {I_hat.shape}")
    band = np.broadcast_to(band, I_hat.shape[:1] + band.shape[1:])
    count = int(band.sum()) * I_hat.shape[1]
    if count == 0:
        return as_tensor(0.0)

    weight = band.astype(I_hat.dtype)
    variation = absolute(forward_diff(I_hat, 2)) + absolute(forward_diff(I_hat, 3)) + absolute(forward_diff(I_hat, 4))
    total = reduce_sum(variation * weight)
    return total / float(count) if reduction == "mean" else total


def _score(s):
    return s if isinstance(s, Tensor) else as_tensor(s)


def loss_adv_d(score_fake, score_real, convention="inverted"):
    """
    Hinge loss of the critic, averaged over per-sample scores.

    inverted: max(0, 1 - D(fake)) + max(0, 1 + D(real))
    standard: max(0, 1 - D(real)) + max(0, 1 + D(fake))
    """
    if convention not in HINGE_CONVENTIONS:
        raise PreconditionError(f"hinge convention must be one of {HINGE_CONVENTIONS}, got '{convention}'")
    fake, real = _score(score_fake), _score(score_real)
    if convention == "standard":
        fake, real = real, fake
    return reduce_mean(relu(1 - fake)) + reduce_mean(relu(1 + real))


def loss_adv_g(score_fake):
    return -reduce_mean(_score(score_fake))


def loss_total(rec, btv, adv_g, w=None):
    w = w or LossWeights()
    return w.w_rec * as_tensor(rec) + w.w_btv * as_tensor(btv) + w.w_adv * as_tensor(adv_g)
