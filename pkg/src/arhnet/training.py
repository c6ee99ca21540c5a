#!/usr/bin/env python3
"""
🏋️ Training - alternating hinge-GAN optimization of G and D.

Each iteration:
1. perturb every patch's foreground with a fresh (alpha, lambda),
2. one D step on (I_hat detached, I_tilde, M) vs (I, I_tilde, M),
3. one G step on 100 * L_rec + 10 * L_btv + 1 * L_adv(G), with D
   re-evaluated on the live I_hat.

Checkpoints land in `<out_dir>/checkpoints/ckpt_<iter>.arhf`, the loss log
in `<out_dir>/train_log.csv`.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from tqdm import tqdm

from .augment import extract_boundary, perturb_array, sample_perturbation
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .dataset import PatchLoader, load_dataset, probe_batch
from .errors import NumericError
from .losses import loss_adv_d, loss_adv_g, loss_btv, loss_rec, loss_total
from .metrics import psnr
from .networks import ModelParams, detached, discriminator_forward, generator_forward, init_params
from .optim import AdamW, OptimState
from .tensor import as_batch, backward, parameter

logger = logging.getLogger(__name__)

LOG_HEADER = ["iter", "l_rec", "l_btv", "l_adv_g", "l_adv_d", "probe_fpsnr"]


@dataclass
class StepReport:
    iteration: int
    l_rec: float
    l_btv: float
    l_adv_g: float
    l_adv_d: float
    l_total: float
    grad_norm_g: float
    grad_norm_d: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_path: Path
    history: list


def make_optimizers(params, config, g_state=None, d_state=None):
    kwargs = dict(betas=config.betas, eps=config.eps, weight_decay=config.weight_decay)
    return (AdamW(params.generator, config.lr_g, state=g_state, **kwargs),
            AdamW(params.discriminator, config.lr_d, state=d_state, **kwargs))


def perturb_batch(images, masks, rngs, config):
    """Per-sample perturbed patches and boundary bands, shaped like `images`."""
    perturbed, bands = [], []
    for image, mask, rng in zip(images, masks, rngs):
        p = sample_perturbation(rng, config.perturb_range)
        perturbed.append(perturb_array(image, mask, p))
        bands.append(extract_boundary(mask[0], config.boundary_radius)[None])
    return np.stack(perturbed), np.stack(bands)


def _check_finite(iteration, **components):
    if all(np.isfinite(v) for v in components.values()):
        return
    detail = ", ".join(f"{k}={v}" for k, v in components.items())
    raise NumericError(f"non-finite loss at iteration {iteration}: {detail}")


def train_step(images, masks, params, opt_g, opt_d, config, rngs, iteration=0):
    """
    One D update followed by one G update.

    `images` / `masks` are (B, 1, p, p, p) arrays; `rngs` holds one
    generator per sample, used to draw that sample's perturbation.
    """
    g_cfg = config.generator_config()
    perturbed, bands = perturb_batch(images, masks, rngs, config)
    I, I_tilde = as_batch(images), as_batch(perturbed)
    _, I_hat = generator_forward(I_tilde, masks, params.generator, g_cfg)

    opt_d.zero_grad()
    fake = discriminator_forward(I_hat.detach(), I_tilde, masks, params.discriminator)
    real = discriminator_forward(I, I_tilde, masks, params.discriminator)
    l_adv_d = loss_adv_d(fake, real, config.hinge_convention)
    _check_finite(iteration, l_adv_d=l_adv_d.item())
    backward(l_adv_d)
    grad_norm_d = opt_d.step()
    opt_d.zero_grad()

    opt_g.zero_grad()
    score = discriminator_forward(I_hat, I_tilde, masks, params.discriminator)
    l_rec = loss_rec(I, I_hat, config.loss_reduction)
    l_btv = loss_btv(I_hat, bands, config.loss_reduction)
    l_adv_g = loss_adv_g(score)
    l_total = loss_total(l_rec, l_btv, l_adv_g, config.loss_weights())
    values = dict(l_rec=l_rec.item(), l_btv=l_btv.item(), l_adv_g=l_adv_g.item(), l_adv_d=l_adv_d.item())
    _check_finite(iteration, **values, l_total=l_total.item())
    backward(l_total)
    grad_norm_g = opt_g.step()
    # G's loss also reached D's weights; those gradients are discarded
    opt_g.zero_grad()
    opt_d.zero_grad()

    return StepReport(iteration, **values, l_total=l_total.item(),
                      grad_norm_g=grad_norm_g, grad_norm_d=grad_norm_d)


# --- checkpoints ------------------------------------------------------------

def make_checkpoint(params, opt_g, opt_d, config, iteration):
    buffers = {name: t.data for name, t in params.named().items()}
    buffers.update(opt_g.state.buffers("opt_g"))
    buffers.update(opt_d.state.buffers("opt_d"))
    meta = {
        "iteration": int(iteration),
        "seed": int(config.seed),
        "opt_g_step": opt_g.state.step,
        "opt_d_step": opt_d.state.step,
        "config": config.to_dict(),
    }
    return Checkpoint(buffers, meta)


def restore(ckpt):
    """Checkpoint -> (config, params, generator optimizer state, discriminator optimizer state)."""
    config = TrainConfig.from_dict(ckpt.meta.get("config", {}))
    named = {k: parameter(v, k[2:]) for k, v in ckpt.buffers.items() if k[:2] in ("G.", "D.")}
    params = ModelParams.from_named(named)
    g_state = OptimState.from_buffers(ckpt.buffers, "opt_g", int(ckpt.meta.get("opt_g_step", 0)))
    d_state = OptimState.from_buffers(ckpt.buffers, "opt_d", int(ckpt.meta.get("opt_d_step", 0)))
    return config, params, g_state, d_state


# --- training loop ----------------------------------------------------------

def _fmt(value):
    return "" if value is None else f"{value:.9g}"


class Trainer:
    def __init__(self, config, resume=None):
        self.config = config.validate()
        self.resume = resume
        self.out_dir = Path(config.out_dir)
        self.log_path = self.out_dir / "train_log.csv"
        self.checkpoint_dir = self.out_dir / "checkpoints"
        self.start = 0
        self.probe = None

    def setup(self):
        config = self.config
        cases = load_dataset(config.data_dir, config.max_lesion_voxels)
        self.loader = PatchLoader(cases, config.patch_size, config.batch_size, config.seed, config.threads)

        if config.probe_dir:
            probe_cases = load_dataset(config.probe_dir, config.max_lesion_voxels)
            images, masks, rngs = probe_batch(probe_cases, config.patch_size, config.seed, config.probe_count)
            perturbed, _ = perturb_batch(images, masks, rngs, config)
            self.probe = (images, masks, perturbed)
        else:
            logger.warning("⚠️ No probe_dir configured: probe_fpsnr column stays empty")

        if self.resume:
            ckpt = load_checkpoint(self.resume)
            stored, self.params, g_state, d_state = restore(ckpt)
            if stored.to_dict() != config.to_dict():
                logger.warning("⚠️ Resuming with a config that differs from the checkpoint's")
            self.start = ckpt.iteration
            logger.info(f"🔁 Resuming from {self.resume} at iteration {self.start}")
        else:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed])))
            self.params = init_params(config.generator_config(), config.discriminator_config(), rng)
            g_state = d_state = None
        self.opt_g, self.opt_d = make_optimizers(self.params, config, g_state, d_state)
        return self

    @property
    def total_iterations(self):
        return self.config.iterations or self.config.epochs * self.loader.steps_per_epoch

    def probe_fpsnr(self):
        if self.probe is None:
            return None
        images, masks, perturbed = self.probe
        _, I_hat = generator_forward(perturbed, masks, detached(self.params.generator),
                                     self.config.generator_config())
        return float(np.mean([psnr(images[i, 0], I_hat.data[i, 0], masks[i, 0]) for i in range(len(images))]))

    def _open_log(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        kept = []
        if self.start and self.log_path.exists():
            with open(self.log_path, 'r', encoding='utf-8', newline='') as f:
                rows = list(csv.reader(f))
            kept = [row for row in rows[1:] if row and int(row[0]) <= self.start]
        f = open(self.log_path, 'w', encoding='utf-8', newline='')
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        writer.writerows(kept)
        return f, writer

    def save(self, iteration):
        ckpt = make_checkpoint(self.params, self.opt_g, self.opt_d, self.config, iteration)
        save_checkpoint(ckpt, self.checkpoint_dir / f"ckpt_{iteration:06d}.arhf")
        return ckpt

    def run(self):
        config = self.config
        total = self.total_iterations
        steps_per_epoch = self.loader.steps_per_epoch
        logger.info(f"🚀 Training {config.norm_kind} generator: {total} iterations, "
                    f"{steps_per_epoch} step(s) per epoch, patch {config.patch_size}")

        history = []
        ckpt = None
        f, writer = self._open_log()
        try:
            progress = tqdm(range(self.start + 1, total + 1), initial=self.start, total=total, desc="Training")
            for iteration in progress:
                epoch, step = divmod(iteration - 1, steps_per_epoch)
                images, masks, rngs = self.loader.batch(epoch, step)
                report = train_step(images, masks, self.params, self.opt_g, self.opt_d, config, rngs, iteration)
                probe = self.probe_fpsnr() if iteration % config.probe_every == 0 else None
                history.append(report)

                writer.writerow([iteration, _fmt(report.l_rec), _fmt(report.l_btv),
                                 _fmt(report.l_adv_g), _fmt(report.l_adv_d), _fmt(probe)])
                f.flush()
                progress.set_postfix(l_rec=f"{report.l_rec:.4f}", l_d=f"{report.l_adv_d:.3f}")
                if iteration % config.log_every == 0:
                    logger.info(f"iter {iteration}: rec {report.l_rec:.5f} btv {report.l_btv:.5f} "
                                f"adv_g {report.l_adv_g:.4f} adv_d {report.l_adv_d:.4f}"
                                + (f" probe fPSNR {probe:.2f} dB" if probe is not None else ""))
                if iteration % config.checkpoint_every == 0 or iteration == total:
                    ckpt = self.save(iteration)
        finally:
            f.close()

        if ckpt is None:
            ckpt = make_checkpoint(self.params, self.opt_g, self.opt_d, config, self.start)
            logger.info(f"Nothing to train: already at iteration {self.start} of {total}")
        logger.info(f"✅ Training finished at iteration {ckpt.iteration}, log: {self.log_path}")
        return TrainResult(ckpt, self.log_path, history)


def train(config, resume=None):
    return Trainer(config, resume).setup().run()
