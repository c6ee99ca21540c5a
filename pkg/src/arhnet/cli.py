#!/usr/bin/env python3
"""
🧰 ARHNet command line.

    perturb        foreground intensity perturbation of one volume
    composite      Copy-Paste a donor lesion into a host scan
    harmonize      identity / histogram matching / trained model
    train          adversarial training from a config file
    eval           harmonization or segmentation metrics as CSV
    slice-export   one slice as an 8-bit PGM
    gradcheck      finite-difference checks of the autodiff engine
    synth-data     synthetic lesion dataset
    augment-batch  Copy-Paste N composites, then harmonize them

Exit codes: 0 ok, 2 usage, 3 data, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import (
    Perturbation,
    PlacementPolicy,
    composite_stream,
    copy_paste,
    perturb_foreground,
    sample_perturbation,
)
from .checkpoint import load_checkpoint
from .classic import REFERENCES, composite_identity, histogram_match
from .config import load_config
from .dataset import IMAGE_SUFFIXES, Case, load_dataset, save_case, write_synth_dataset
from .errors import ArhnetError, NumericError, PreconditionError, UsageError
from .gradcheck import run_gradchecks
from .logs import setup_logging
from .metrics import harmonization_report, segmentation_report
from .networks import harmonize_volume
from .training import restore, train
from .volume import load_mask, load_volume, normalize_intensity, save_mask, save_volume

logger = logging.getLogger(__name__)

METHODS = ("identity", "hm", "model")
AXES = {"x": 0, "y": 1, "z": 2}


def _seeded(seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))


def _load_image(path, normalize=False):
    image = load_volume(path)
    return normalize_intensity(image) if normalize else image


# --- harmonizers ------------------------------------------------------------

class Harmonizer:
    """One interface over the three harmonization methods."""

    def __init__(self, method, checkpoint=None, bins=256, context_radius=8, reference="local"):
        if method not in METHODS:
            raise UsageError(f"--method must be one of {METHODS}")
        self.method = method
        self.bins = bins
        self.context_radius = context_radius
        self.reference = reference
        if method == "model":
            if not checkpoint:
                raise UsageError("--method model needs --checkpoint")
            config, params, _, _ = restore(load_checkpoint(checkpoint))
            self.generator = params.generator
            self.g_config = config.generator_config()
            self.patch_size = config.patch_size

    def __call__(self, image, mask):
        if self.method == "identity":
            return composite_identity(image)
        if self.method == "hm":
            return histogram_match(image, mask, self.bins, self.context_radius, self.reference)
        return harmonize_volume(image, mask, self.generator, self.g_config, self.patch_size)


# --- commands ---------------------------------------------------------------

def cmd_perturb(args):
    image = _load_image(args.image, args.normalize)
    mask = load_mask(args.mask)
    if args.alpha is not None or args.lam is not None:
        p = Perturbation(args.alpha or 0.0, args.lam or 0.0)
    else:
        p = sample_perturbation(_seeded(args.seed), args.perturb_range)
    save_volume(perturb_foreground(image, mask, p), args.out)
    logger.info(f"✅ Perturbed foreground (alpha={p.alpha:.4f}, lambda={p.lam:.4f}) -> {args.out}")


def cmd_composite(args):
    host = _load_image(args.host, args.normalize)
    donor = _load_image(args.donor, args.normalize)
    policy = PlacementPolicy(args.max_attempts, args.allow_overlap,
                             load_mask(args.host_region) if args.host_region else None)
    image, mask = copy_paste(host, load_mask(args.host_mask), donor, load_mask(args.donor_mask),
                             policy, _seeded(args.seed))
    save_volume(image, args.out_image)
    save_mask(mask, args.out_mask)
    logger.info(f"✅ Composite written: {args.out_image}, {args.out_mask}")


def cmd_harmonize(args):
    harmonizer = Harmonizer(args.method, args.checkpoint, args.bins, args.context_radius, args.hm_reference)
    image = _load_image(args.image, args.normalize)
    result = harmonizer(image, load_mask(args.mask))
    save_volume(result, args.out)
    logger.info(f"✅ Harmonized ({args.method}) -> {args.out}")


def cmd_train(args):
    overrides = list(args.override or [])
    if args.threads:
        overrides.append(f"threads={args.threads}")
    config = load_config(args.config, overrides)
    result = train(config, args.resume)
    logger.info(f"✅ Final checkpoint at iteration {result.checkpoint.iteration}; log {result.log_path}")


def _case_files(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise PreconditionError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix in IMAGE_SUFFIXES)


def _mean_row(rows):
    means = []
    for column in zip(*[row[1:] for row in rows]):
        values = [v for v in column if v is not None]
        means.append(float(np.mean(values)) if values else None)
    return ["mean"] + means


def _fmt(value):
    return "" if value is None else f"{value:.6f}"


def cmd_eval(args):
    rows = []
    for pred_path in _case_files(args.pred_dir):
        gt_path = Path(args.gt_dir) / pred_path.name
        if not gt_path.exists():
            logger.warning(f"⚠️ {pred_path.name}: no ground truth in {args.gt_dir}, skipped")
            continue
        if args.metrics == "harmonization":
            if not args.mask_dir:
                raise UsageError("--metrics harmonization needs --mask-dir")
            mask = load_mask(Path(args.mask_dir) / pred_path.name)
            report = harmonization_report(load_volume(gt_path), load_volume(pred_path), mask)
        else:
            gt = load_mask(gt_path)
            report = segmentation_report(load_mask(pred_path), gt, gt.spacing)
        rows.append([pred_path.stem] + report.row())
    if not rows:
        raise PreconditionError(f"no prediction/ground-truth pairs found in {args.pred_dir}")

    header = ["case", "mae", "fmae", "psnr", "fpsnr"] if args.metrics == "harmonization" \
        else ["case", "dice", "asd", "hd95"]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows + [_mean_row(rows)]:
            writer.writerow([row[0]] + [_fmt(v) for v in row[1:]])
    logger.info(f"✅ {len(rows)} case(s) evaluated -> {out}")


def slice_pixels(volume, axis, index):
    data = np.take(volume.data, index, axis=AXES[axis])
    return np.round(np.clip(data, 0.0, 1.0) * 255).astype(np.uint8)


def cmd_slice_export(args):
    volume = load_volume(args.image)
    axis = AXES[args.axis]
    if not 0 <= args.index < volume.dims[axis]:
        raise PreconditionError(f"slice index {args.index} outside axis {args.axis} of size {volume.dims[axis]}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(slice_pixels(volume, args.axis, args.index)).save(out, format="PPM")
    logger.info(f"✅ Slice {args.axis}={args.index} -> {out}")


def cmd_gradcheck(args):
    names = args.op or ["all"]
    results = run_gradchecks(None if "all" in names else names, args.seed, args.sweep)
    failed = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        sweep = "  " + " ".join(f"eps={e:g}:{v:.2e}" for e, v in r.sweep.items()) if r.sweep else ""
        print(f"{r.name:<18} {r.error:.3e}  (< {r.threshold:g})  {status}{sweep}")
        if not r.passed:
            failed.append(r.name)
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    logger.info(f"✅ {len(results)} gradient check(s) passed")


def cmd_synth_data(args):
    write_synth_dataset(args.out_dir, args.n, args.size, args.seed, args.n_test, args.format)


def cmd_augment_batch(args):
    cases = load_dataset(args.data_dir, args.max_lesion_voxels)
    harmonizer = Harmonizer(args.method, args.checkpoint, reference=args.hm_reference)
    policy = PlacementPolicy(args.max_attempts, args.allow_overlap)
    written = 0
    stream = composite_stream([(c.name, c.image, c.mask) for c in cases], args.count, policy, _seeded(args.seed))
    for n, (host_name, donor_name, image, mask) in enumerate(stream):
        harmonized = harmonizer(image, mask)
        save_case(args.out_dir, Case(f"aug{n:04d}", harmonized, mask), args.format)
        logger.debug(f"aug{n:04d}: lesion of {donor_name} pasted into {host_name}")
        written += 1
    logger.info(f"✅ {written} augmented case(s) ({args.method}) -> {args.out_dir}")


# --- parser -----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="arhnet", description="ARHNet lesion harmonization pipeline")
    parser.add_argument("--log-dir", default="logs", help="directory for run log files")
    parser.add_argument("--quiet", action="store_true", help="console shows warnings only")
    parser.add_argument("--threads", type=int, default=0, help="data-loading threads (1 = reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("perturb", help="foreground intensity perturbation")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb-range", type=float, default=0.3)
    p.add_argument("--normalize", action="store_true", help="min-max scale the input first")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("composite", help="Copy-Paste a donor lesion into a host")
    p.add_argument("--host", required=True)
    p.add_argument("--host-mask", required=True)
    p.add_argument("--donor", required=True)
    p.add_argument("--donor-mask", required=True)
    p.add_argument("--host-region", help="mask restricting where the lesion may land")
    p.add_argument("--allow-overlap", action="store_true")
    p.add_argument("--max-attempts", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out-image", required=True)
    p.add_argument("--out-mask", required=True)
    p.set_defaults(func=cmd_composite)

    p = sub.add_parser("harmonize", help="harmonize a composite volume")
    p.add_argument("--method", choices=METHODS, default="hm")
    p.add_argument("--checkpoint")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--hm-reference", choices=REFERENCES, default="local")
    p.add_argument("--context-radius", type=int, default=8)
    p.add_argument("--bins", type=int, default=256)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_harmonize)

    p = sub.add_parser("train", help="train G and D")
    p.add_argument("--config")
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.add_argument("--resume", metavar="CHECKPOINT")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metric CSV over a prediction directory")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--mask-dir")
    p.add_argument("--metrics", choices=("harmonization", "segmentation"), default="harmonization")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("slice-export", help="8-bit PGM slice")
    p.add_argument("--image", required=True)
    p.add_argument("--axis", choices=tuple(AXES), default="z")
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_slice_export)

    p = sub.add_parser("gradcheck", help="finite-difference gradient report")
    p.add_argument("--op", action="append", help="op name or 'all' (repeatable)")
    p.add_argument("--sweep", action="store_true", help="also report eps in {1e-2, 1e-3, 1e-4}")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth-data", help="write a synthetic lesion dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--n-test", type=int, default=0)
    p.add_argument("--size", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("rawf32", "nifti1"), default="rawf32")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("augment-batch", help="Copy-Paste N composites and harmonize them")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--method", choices=METHODS, default="identity")
    p.add_argument("--checkpoint")
    p.add_argument("--hm-reference", choices=REFERENCES, default="local")
    p.add_argument("--allow-overlap", action="store_true")
    p.add_argument("--max-attempts", type=int, default=100)
    p.add_argument("--max-lesion-voxels", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("rawf32", "nifti1"), default="rawf32")
    p.set_defaults(func=cmd_augment_batch)
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else UsageError.exit_code

    setup_logging("arhnet", args.log_dir, console_level=logging.WARNING if args.quiet else None)
    try:
        args.func(args)
    except ArhnetError as exc:
        logger.error(f"❌ {exc}")
        return exc.exit_code
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
