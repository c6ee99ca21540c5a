"""
Desk-scale harmonization experiments on the synthetic set.

Each model trains for the 2000 iterations of configs/desk.cfg, so these
only run with --runslow.
"""

from pathlib import Path

import numpy as np
import pytest

from arhnet.augment import Perturbation, extract_boundary, perturb_foreground
from arhnet.classic import composite_identity, histogram_match
from arhnet.config import load_config
from arhnet.dataset import load_dataset, write_synth_dataset
from arhnet.losses import loss_btv
from arhnet.metrics import psnr
from arhnet.networks import harmonize_volume
from arhnet.training import restore, train

pytestmark = pytest.mark.slow

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.cfg"
TEST_PERTURBATIONS = [Perturbation(0.3, 0.15), Perturbation(-0.3, -0.15),
                      Perturbation(0.25, 0.1), Perturbation(-0.25, -0.2)]


@pytest.fixture(scope="module")
def synth_dirs(tmp_path_factory):
    return write_synth_dataset(tmp_path_factory.mktemp("synth"), n=8, size=24, seed=0, n_test=4)


@pytest.fixture(scope="module")
def composites(synth_dirs):
    cases = load_dataset(synth_dirs["test"])
    assert len(cases) == 4
    return [(case, perturb_foreground(case.image, case.mask, p)) for case, p in zip(cases, TEST_PERTURBATIONS)]


@pytest.fixture(scope="module")
def models(synth_dirs, tmp_path_factory):
    trained = {}
    for norm_kind in ("arh", "instance"):
        out_dir = tmp_path_factory.mktemp(f"run_{norm_kind}")
        config = load_config(DESK_CONFIG, [
            f"data_dir={synth_dirs['train']}",
            f"probe_dir={synth_dirs['test']}",
            f"out_dir={out_dir}",
            f"norm_kind={norm_kind}",
        ])
        result = train(config)
        assert all(np.isfinite(r.l_total) for r in result.history)
        config, params, _, _ = restore(result.checkpoint)
        trained[norm_kind] = (config, params.generator)
    return trained


def harmonize_with(models, norm_kind):
    config, generator = models[norm_kind]
    return lambda image, mask: harmonize_volume(image, mask, generator, config.generator_config(), config.patch_size)


def mean_fpsnr(composites, harmonize):
    return float(np.mean([psnr(case.image.data, harmonize(image, case.mask).data, case.mask.data)
                          for case, image in composites]))


def mean_boundary_tv(composites, harmonize, radius=2):
    return float(np.mean([loss_btv(harmonize(image, case.mask).data, extract_boundary(case.mask.data, radius)).item()
                          for case, image in composites]))


def test_model_beats_histogram_matching_and_composite(models, composites):
    composite = mean_fpsnr(composites, lambda image, mask: composite_identity(image))
    matched = mean_fpsnr(composites, histogram_match)
    model = mean_fpsnr(composites, harmonize_with(models, "arh"))
    assert model >= matched >= composite
    assert model - composite >= 3.0


def test_model_smooths_lesion_boundary(models, composites):
    composite = mean_boundary_tv(composites, lambda image, mask: composite_identity(image))
    model = mean_boundary_tv(composites, harmonize_with(models, "arh"))
    assert model < composite


def test_region_norm_not_worse_than_instance_norm(models, composites):
    arh = mean_fpsnr(composites, harmonize_with(models, "arh"))
    instance = mean_fpsnr(composites, harmonize_with(models, "instance"))
    assert arh >= instance - 0.5
