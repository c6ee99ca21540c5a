#!/usr/bin/env python3
"""
🔬 Gradcheck - finite-difference verification of the autodiff engine.

Each named check builds a scalar function of one input tensor, computes
its analytic gradient with `backward`, and compares a set of probed
coordinates against central differences:

    err = max |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)

Op checks run in float64 (threshold 1e-3). The end-to-end check takes
the analytic gradient of the full generator loss at float32 and compares
it with float64 central differences (threshold 1e-2).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .arh_norm import ArhParams, attention_map, arh_forward, background_stats, baseline_norm
from .augment import extract_boundary
from .errors import UsageError
from .losses import loss_adv_g, loss_btv, loss_rec, loss_total
from .networks import (
    DiscriminatorConfig,
    GeneratorConfig,
    discriminator_forward,
    generator_forward,
    init_params,
)

logger = logging.getLogger(__name__)

OP_THRESHOLD = 1e-3
END_TO_END_THRESHOLD = 1e-2
EPS_SWEEP = (1e-2, 1e-3, 1e-4)


@dataclass
class GradcheckResult:
    name: str
    error: float
    threshold: float
    sweep: dict = field(default_factory=dict)

    @property
    def passed(self):
        return bool(self.error < self.threshold)


def relative_error(g_ad, g_fd):
    return float(np.max(np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))))


def _probe_indices(theta, probes, rng):
    if probes is None or probes >= theta.size:
        return list(np.ndindex(theta.shape))
    rng = rng or np.random.default_rng(0)
    flat = rng.choice(theta.size, size=probes, replace=False)
    return [np.unravel_index(i, theta.shape) for i in sorted(flat)]


def analytic_gradient(f, theta):
    theta.zero_grad()
    loss = f(theta)
    T.backward(loss)
    grad = theta.grad.copy() if theta.grad is not None else np.zeros_like(theta.data)
    theta.zero_grad()
    return grad


def numeric_gradient(f, theta, index, eps):
    original = theta.data[index]
    try:
        theta.data[index] = original + eps
        up = f(theta).item()
        theta.data[index] = original - eps
        down = f(theta).item()
    finally:
        theta.data[index] = original
    return (up - down) / (2 * eps)


def finite_difference_check(f, theta, eps=1e-6, probes=None, rng=None):
    """Max relative error between `backward` and central differences over sampled coordinates."""
    g_ad = analytic_gradient(f, theta)
    indices = _probe_indices(theta, probes, rng)
    g_fd = np.array([numeric_gradient(f, theta, i, eps) for i in indices])
    return relative_error(np.array([g_ad[i] for i in indices]), g_fd)


def eps_sweep(f, theta, eps_values=EPS_SWEEP, probes=None, rng=None):
    return {eps: finite_difference_check(f, theta, eps, probes, rng) for eps in eps_values}


# --- named op checks --------------------------------------------------------

def _away_from_zero(rng, shape, gap=0.1):
    """Random values with |x| >= gap, keeping kinks out of the eps range."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(gap, 1.0, size=shape)


def _weighted(fn, weight):
    return lambda x: T.reduce_sum(fn(x) * weight)


def _op_cases(rng):
    """name -> (f, theta) pairs, all float64."""
    shape = (1, 2, 4, 4, 4)
    x = T.parameter(rng.standard_normal(shape))
    mask = np.zeros((1, 1, 4, 4, 4))
    mask[..., 1:3, 1:3, 1:3] = 1
    weight = T.Tensor(rng.standard_normal(shape))
    w1 = T.Tensor(rng.standard_normal((1, 1, 4, 4, 4)))
    channel = T.Tensor(rng.uniform(0.5, 1.5, size=(1, 2, 1, 1, 1)))
    other = T.Tensor(rng.standard_normal(shape))
    conv_w = T.Tensor(rng.standard_normal((3, 2, 3, 3, 3)) * 0.3)
    conv_b = T.Tensor(rng.standard_normal(3))
    arh = ArhParams.init(2, rng)
    band = extract_boundary(mask[0, 0].astype(bool), 1)[None, None]

    def positive():
        return T.parameter(rng.uniform(0.5, 2.0, size=shape))

    def kinked():
        return T.parameter(_away_from_zero(rng, shape))

    return {
        "conv3d": (lambda t: T.reduce_sum(T.conv3d(t, conv_w, conv_b, 1, 1) * T.Tensor(np.linspace(-1, 1, 3 * 64).reshape(1, 3, 4, 4, 4))), x),
        "conv3d_weight": (lambda w: T.reduce_sum(T.conv3d(x.detach(), w, conv_b, 2, 1)), T.parameter(conv_w.data)),
        "add": (_weighted(lambda t: t + channel, weight), x),
        "sub": (_weighted(lambda t: other - t, weight), x),
        "mul": (_weighted(lambda t: t * t * channel, weight), x),
        "div": (_weighted(lambda t: other / t, weight), positive()),
        "scale": (_weighted(lambda t: T.scale(t, -2.5), weight), x),
        "leaky_relu": (_weighted(lambda t: T.leaky_relu(t, 0.2), weight), kinked()),
        "sigmoid": (_weighted(T.sigmoid, weight), x),
        "abs": (_weighted(T.absolute, weight), kinked()),
        "sqrt": (_weighted(T.sqrt, weight), positive()),
        "sum": (lambda t: T.reduce_sum(T.reduce_sum(t, (2, 3, 4)) * channel), x),
        "mean": (lambda t: T.reduce_sum(T.reduce_mean(t, 1) * w1), x),
        "max": (lambda t: T.reduce_sum(T.reduce_max(t, 1) * w1), x),
        "concat": (lambda t: T.reduce_sum(T.concat([t, t * t], 1) * T.concat([weight, other], 1)), x),
        "upsample": (lambda t: T.reduce_sum(T.upsample_nearest(t) * T.Tensor(np.arange(2 * 512.0).reshape(1, 2, 8, 8, 8) / 512)), x),
        "avg_pool": (lambda t: T.reduce_sum(T.avg_pool(t * t) * T.Tensor(np.arange(16.0).reshape(1, 2, 2, 2, 2))), x),
        "forward_diff": (_weighted(lambda t: T.forward_diff(t, 3), weight), x),
        "instance_norm": (_weighted(T.instance_norm, weight), x),
        "batch_norm": (_weighted(T.batch_norm, weight), x),
        "background_stats": (lambda t: T.reduce_sum(background_stats(t, mask).sigma * channel)
                             + T.reduce_sum(background_stats(t, mask).mu), x),
        "attention_map": (lambda t: T.reduce_sum(attention_map(t, arh) * w1), x),
        "arh_forward": (_weighted(lambda t: arh_forward(t, mask, arh), weight), x),
        "rain": (_weighted(lambda t: baseline_norm("rain", t, mask), weight), x),
        "loss_rec": (lambda t: loss_rec(other, t), kinked()),
        "loss_btv": (lambda t: loss_btv(t, band), x),
    }


OP_NAMES = (
    "conv3d", "conv3d_weight", "add", "sub", "mul", "div", "scale", "leaky_relu", "sigmoid",
    "abs", "sqrt", "sum", "mean", "max", "concat", "upsample", "avg_pool", "forward_diff",
    "instance_norm", "batch_norm", "background_stats", "attention_map", "arh_forward", "rain",
    "loss_rec", "loss_btv",
)


def _end_to_end_master(rng):
    """float64 master weights, inputs and config for the end-to-end check."""
    g_cfg = GeneratorConfig(levels=2, base_channels=2)
    d_cfg = DiscriminatorConfig(layers=2, base_channels=2)
    params = init_params(g_cfg, d_cfg, rng, zero_output=False)
    image = rng.uniform(0.3, 0.7, size=(1, 1, 8, 8, 8))
    mask = np.zeros((1, 1, 8, 8, 8), dtype=bool)
    mask[..., 2:6, 3:6, 2:5] = True
    perturbed = np.where(mask, image * 1.2 + 0.05, image)
    band = extract_boundary(mask[0, 0], 1)[None, None]
    named = {k: t.data.astype(np.float64) for k, t in params.named().items()}
    return g_cfg, named, image, perturbed, mask, band


def _end_to_end(rng, probes=5):
    g_cfg, master, image, perturbed, mask, band = _end_to_end_master(rng)
    # five generator weight tensors spread through the network, probed at their largest gradient
    names = [k for k in sorted(master) if k.startswith("G.") and k.endswith(".weight")]
    picks = [names[i] for i in np.linspace(0, len(names) - 1, probes).astype(int)]

    def loss_for(params):
        generator = {k[2:]: v for k, v in params.items() if k.startswith("G.")}
        discriminator = {k[2:]: v for k, v in params.items() if k.startswith("D.")}
        _, I_hat = generator_forward(perturbed, mask, generator, g_cfg)
        score = discriminator_forward(I_hat, perturbed, mask, discriminator)
        return loss_total(loss_rec(image, I_hat), loss_btv(I_hat, band), loss_adv_g(score))

    with T.precision(np.float32):
        params32 = {k: T.parameter(v, k) for k, v in master.items()}
        T.backward(loss_for(params32))
        grads = [params32[name].grad for name in picks]
        indices = [np.unravel_index(int(np.argmax(np.abs(g))), g.shape) for g in grads]
        g_ad = np.array([float(g[i]) for g, i in zip(grads, indices)])

    with T.precision(np.float64):
        params64 = {k: T.parameter(v, k) for k, v in master.items()}
        g_fd = []
        for name, index in zip(picks, indices):
            g_fd.append(numeric_gradient(lambda _: loss_for(params64), params64[name], index, 1e-6))
    return relative_error(g_ad, np.array(g_fd))


def run_gradchecks(names=None, seed=0, sweep=False):
    """Run the named checks ("all" or None for every check, plus "end_to_end")."""
    known = OP_NAMES + ("end_to_end",)
    if names is None or names == "all" or names == ["all"]:
        names = known
    names = [names] if isinstance(names, str) else list(names)
    unknown = [n for n in names if n not in known]
    if unknown:
        raise UsageError(f"unknown gradcheck op(s) {unknown}; known: {', '.join(known)}")

    results = []
    for name in names:
        rng = np.random.default_rng(seed)
        if name == "end_to_end":
            results.append(GradcheckResult(name, _end_to_end(rng), END_TO_END_THRESHOLD))
            continue
        with T.precision(np.float64):
            f, theta = _op_cases(rng)[name]
            error = finite_difference_check(f, theta)
            swept = eps_sweep(f, theta) if sweep else {}
        results.append(GradcheckResult(name, error, OP_THRESHOLD, swept))
        logger.debug(f"gradcheck {name}: {error:.3e}")
    return results
