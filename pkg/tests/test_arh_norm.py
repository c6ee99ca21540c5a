import numpy as np
import pytest
from scipy import ndimage

from arhnet import tensor as T
from arhnet.arh_norm import (
    ArhParams,
    NormLayer,
    RegionStats,
    arh_forward,
    attention_map,
    background_stats,
    baseline_norm,
    foreground_scaling,
    mask_resize,
    region_instance_norm,
    scaling_params,
    split_regions,
)
from arhnet.errors import ArhnetError, DegenerateRegionError, ShapeError
from arhnet.layers import ConvParams
from arhnet.volume import Mask3D


# --- scalar oracles ---------------------------------------------------------

def oracle_conv(x, conv):
    """Zero-padded 'same' cross-correlation of one sample (C, H, W, D) via scipy."""
    w, b = conv.weight.data, conv.bias.data
    out = np.zeros((w.shape[0],) + x.shape[1:])
    for o in range(w.shape[0]):
        out[o] = b[o]
        for c in range(w.shape[1]):
            out[o] += ndimage.correlate(x[c], w[o, c], mode="constant", cval=0.0)
    return out


def oracle_background(F, M):
    """Loop over background voxels of one sample: F (C, H, W, D), M (H, W, D)."""
    C = F.shape[0]
    mu, sigma = np.zeros(C), np.zeros(C)
    voxels = [idx for idx in np.ndindex(M.shape) if not M[idx]]
    for c in range(C):
        values = [F[(c,) + idx] for idx in voxels]
        mu[c] = sum(values) / len(values)
        sigma[c] = np.sqrt(sum((v - mu[c]) ** 2 for v in values) / len(values))
    return mu, sigma


def oracle_region_norm(F, region, eps):
    out = np.zeros_like(F)
    if not region.any():
        return out
    for c in range(F.shape[0]):
        values = F[c][region]
        out[c][region] = (values - values.mean()) / np.sqrt(values.var() + eps)
    return out


def oracle_arh(F, M, p, eps=1e-5):
    mu, sigma = oracle_background(F, M)
    f_norm = oracle_region_norm(F, M, eps)
    b_norm = oracle_region_norm(F, ~M, eps)
    stacked = np.stack([F.max(axis=0), F.mean(axis=0), oracle_conv(F, p.attn_reduce)[0]])
    F_a = 1.0 / (1.0 + np.exp(-oracle_conv(stacked, p.attn_fuse)))
    gamma = oracle_conv(F_a, p.gamma_conv)
    beta = oracle_conv(F_a, p.beta_conv)
    gamma_f = oracle_conv(gamma + sigma[:, None, None, None], p.gamma_f_conv)
    beta_f = oracle_conv(beta + mu[:, None, None, None], p.beta_f_conv)
    return f_norm * (1 + gamma_f) + beta_f + b_norm


def random_params(rng, channels):
    p = ArhParams.init(channels, rng)
    for name in ("attn_reduce", "attn_fuse", "gamma_conv", "beta_conv", "gamma_f_conv", "beta_f_conv"):
        conv = getattr(p, name)
        conv.bias.data = rng.standard_normal(conv.bias.shape) * 0.1
    return p


# --- region split and masks -------------------------------------------------

def test_split_regions_partition(rng):
    F = rng.standard_normal((1, 3, 4, 4, 4)).astype(np.float32)
    for M in (np.ones((4, 4, 4)), np.zeros((4, 4, 4)), rng.random((4, 4, 4)) > 0.5):
        F_f, F_b = split_regions(F, M)
        np.testing.assert_array_equal(F_f.data + F_b.data, F)
        assert not F_f.data[:, :, ~M.astype(bool)].any()
    F_f, F_b = split_regions(F, np.ones((4, 4, 4)))
    np.testing.assert_array_equal(F_f.data, F)
    assert not F_b.data.any()


def test_split_regions_dim_mismatch():
    with pytest.raises(ShapeError):
        split_regions(np.zeros((1, 1, 4, 4, 4)), np.zeros((2, 2, 2)))


def test_mask_resize_rules():
    ones = Mask3D(np.ones((8, 8, 8)))
    for size in (8, 4, 2, 1):
        assert mask_resize(ones, (size,) * 3).data.all()

    single = np.zeros((4, 4, 4), dtype=bool)
    single[0, 0, 0] = True
    assert mask_resize(Mask3D(single), (2, 2, 2)).data[0, 0, 0]

    checker = (np.indices((2, 2, 2)).sum(axis=0) % 2 == 1)
    assert mask_resize(checker, (1, 1, 1))[0, 0, 0] == checker[0, 0, 0]
    assert mask_resize(~checker, (1, 1, 1))[0, 0, 0] == (~checker)[0, 0, 0]

    with pytest.raises(ShapeError):
        mask_resize(Mask3D(np.ones((6, 6, 6))), (4, 4, 4))
    with pytest.raises(ShapeError):
        mask_resize(Mask3D(np.ones((12, 12, 12))), (4, 4, 4))


def test_mask_resize_scales_spacing():
    out = mask_resize(Mask3D(np.ones((4, 4, 4)), spacing=(1.0, 1.0, 2.0)), (2, 2, 1))
    assert out.spacing == (2.0, 2.0, 8.0)


# --- background statistics --------------------------------------------------

def test_background_stats_example(float64):
    stats = background_stats(np.array([1.0, 3.0, 5.0]).reshape(1, 1, 3, 1, 1),
                             np.array([1, 0, 0], dtype=bool).reshape(3, 1, 1))
    assert stats.mu.item() == pytest.approx(4.0)
    assert stats.sigma.item() == pytest.approx(1.0)


def test_background_stats_constant_without_lesion(float64):
    stats = background_stats(np.full((1, 2, 3, 3, 3), 2.5), np.zeros((3, 3, 3)))
    np.testing.assert_allclose(stats.mu.data, 2.5)
    np.testing.assert_allclose(stats.sigma.data, 0.0, atol=1e-12)


def test_background_stats_empty_background():
    with pytest.raises(DegenerateRegionError):
        background_stats(np.ones((1, 1, 2, 2, 2)), np.ones((2, 2, 2)))


@pytest.mark.parametrize("seed", range(25))
def test_background_stats_matches_loop_oracle(float64, seed):
    rng = np.random.default_rng(seed)
    C = int(rng.integers(1, 4))
    F = rng.standard_normal((1, C, 4, 4, 4))
    M = rng.random((4, 4, 4)) > 0.6
    stats = background_stats(F, M)
    mu, sigma = oracle_background(F[0], M)
    np.testing.assert_allclose(stats.mu.data.ravel(), mu, atol=1e-10)
    np.testing.assert_allclose(stats.sigma.data.ravel(), sigma, atol=1e-10)


def test_background_stats_permutation_invariant(float64, rng):
    F = rng.standard_normal((1, 2, 4, 4, 4))
    M = np.zeros((4, 4, 4), dtype=bool)
    M[:2] = True
    shuffled = F.copy()
    flat = shuffled[:, :, 2:].reshape(1, 2, -1)
    shuffled[:, :, 2:] = flat[:, :, rng.permutation(flat.shape[2])].reshape(1, 2, 2, 4, 4)
    a, b = background_stats(F, M), background_stats(shuffled, M)
    np.testing.assert_allclose(a.mu.data, b.mu.data, atol=1e-12)
    np.testing.assert_allclose(a.sigma.data, b.sigma.data, atol=1e-12)


def test_literal_sigma_counts_foreground_offsets(float64):
    F = np.array([1.0, 3.0, 5.0]).reshape(1, 1, 3, 1, 1)
    M = np.array([1, 0, 0], dtype=bool).reshape(3, 1, 1)
    literal = background_stats(F, M, literal_sigma=True)
    # the masked foreground voxel adds mu^2 = 16 to the sum of squares
    assert literal.sigma.item() == pytest.approx(np.sqrt((1 + 1 + 16) / 2))


# --- attention and scaling --------------------------------------------------

def test_attention_map_zero_params(rng):
    p = ArhParams.init(3, rng, zero=True)
    F_a = attention_map(rng.standard_normal((2, 3, 4, 4, 4)), p)
    assert F_a.shape == (2, 1, 4, 4, 4)
    np.testing.assert_array_equal(F_a.data, 0.5)


def test_attention_map_is_in_open_unit_interval(rng):
    F_a = attention_map(rng.standard_normal((1, 5, 4, 4, 4)), ArhParams.init(5, rng))
    assert F_a.shape == (1, 1, 4, 4, 4)
    assert (F_a.data > 0).all() and (F_a.data < 1).all()


def test_scaling_params_zero_and_linear(float64, rng):
    p = ArhParams.init(4, rng, zero=True)
    gamma, beta = scaling_params(T.Tensor(rng.random((1, 1, 4, 4, 4))), p)
    assert gamma.shape == (1, 4, 4, 4, 4) and not gamma.data.any() and not beta.data.any()

    p = ArhParams.init(4, rng, kernel=1)
    F_a = rng.random((1, 1, 4, 4, 4))
    g1, _ = scaling_params(T.Tensor(F_a), p)
    g2, _ = scaling_params(T.Tensor(2 * F_a), p)
    np.testing.assert_allclose(g2.data, 2 * g1.data, atol=1e-12)
    with pytest.raises(ShapeError):
        scaling_params(T.Tensor(np.zeros((1, 2, 4, 4, 4))), p)


def test_foreground_scaling_identity_convs(float64):
    C = 2
    p = ArhParams.init(C, np.random.default_rng(0), kernel=1, zero=True)
    p.gamma_f_conv.weight.data = np.eye(C).reshape(C, C, 1, 1, 1)
    p.beta_f_conv.weight.data = np.eye(C).reshape(C, C, 1, 1, 1)
    zeros = T.Tensor(np.zeros((1, C, 2, 2, 2)))
    stats = RegionStats(mu=T.Tensor(np.zeros((1, C, 1, 1, 1))), sigma=T.Tensor(np.ones((1, C, 1, 1, 1))))
    gamma_f, beta_f = foreground_scaling(zeros, zeros, stats, p)
    np.testing.assert_allclose(gamma_f.data, 1.0)
    np.testing.assert_allclose(beta_f.data, 0.0)

    zero_p = ArhParams.init(C, np.random.default_rng(0), zero=True)
    gamma_f, beta_f = foreground_scaling(zeros, zeros, stats, zero_p)
    assert not gamma_f.data.any() and not beta_f.data.any()


# --- ARH forward ------------------------------------------------------------

def test_zero_params_reduce_to_region_instance_norm(float64, rng):
    F = rng.standard_normal((1, 3, 4, 4, 4))
    M = rng.random((4, 4, 4)) > 0.5
    m = M[None, None].astype(float)
    out = arh_forward(F, M, ArhParams.init(3, rng, zero=True))
    expected = region_instance_norm(F, m).data + region_instance_norm(F, 1 - m).data
    np.testing.assert_allclose(out.data, expected, atol=1e-6)


def test_empty_lesion_falls_back_to_instance_norm(float64, rng):
    F = rng.standard_normal((1, 2, 4, 4, 4))
    out = arh_forward(F, np.zeros((4, 4, 4)), random_params(rng, 2))
    np.testing.assert_allclose(out.data, T.instance_norm(F).data, atol=1e-10)


def test_lesion_filling_the_map_uses_whole_map_stats(float64, rng):
    F = rng.standard_normal((1, 2, 4, 4, 4))
    out = arh_forward(F, np.ones((4, 4, 4)), random_params(rng, 2))
    assert np.isfinite(out.data).all()


@pytest.mark.parametrize("seed", range(25))
def test_arh_forward_matches_scalar_oracle(float64, seed):
    rng = np.random.default_rng(100 + seed)
    C = int(rng.integers(1, 4))
    F = rng.standard_normal((1, C, 4, 4, 4))
    M = rng.random((4, 4, 4)) > 0.6
    if not M.any():
        M[1, 2, 3] = True
    p = random_params(rng, C)
    np.testing.assert_allclose(arh_forward(F, M, p).data[0], oracle_arh(F[0], M, p), atol=1e-5)


def test_background_independent_of_foreground_when_attention_is_zero(float64, rng):
    p = random_params(rng, 2)
    p.beta_f_conv = ConvParams(T.Tensor(np.zeros((2, 2, 3, 3, 3))), T.Tensor(np.zeros(2)))
    M = np.zeros((4, 4, 4), dtype=bool)
    M[1:3, 1:3, 1:3] = True
    F = rng.standard_normal((1, 2, 4, 4, 4))
    G = F.copy()
    G[:, :, M] += 5.0
    a, b = arh_forward(F, M, p).data, arh_forward(G, M, p).data
    np.testing.assert_allclose(a[:, :, ~M], b[:, :, ~M], atol=1e-10)


def test_arh_forward_batch_mixes_degenerate_samples(float64, rng):
    F = rng.standard_normal((2, 2, 4, 4, 4))
    M = np.zeros((2, 1, 4, 4, 4), dtype=bool)
    M[0, 0, 1:3, 1:3, 1:3] = True
    p = random_params(rng, 2)
    out = arh_forward(F, M, p).data
    np.testing.assert_allclose(out[0], arh_forward(F[:1], M[:1], p).data[0], atol=1e-10)
    np.testing.assert_allclose(out[1], T.instance_norm(F[1:]).data[0], atol=1e-10)


# --- baselines --------------------------------------------------------------

def test_rain_with_unit_stats(float64, rng):
    M = np.zeros((4, 4, 4), dtype=bool)
    M[:2] = True
    F = rng.standard_normal((1, 1, 4, 4, 4))
    bg = rng.standard_normal(32)
    # standardize the background so mu = 0 and sigma = 1
    F[0, 0, ~M] = (bg - bg.mean()) / bg.std()
    m = M[None, None].astype(float)
    out = baseline_norm("rain", F, M)
    expected = region_instance_norm(F, m).data + F * (1 - m)
    np.testing.assert_allclose(out.data, expected, atol=1e-10)


def test_rain_without_lesion_is_instance_norm(float64, rng):
    F = rng.standard_normal((1, 2, 4, 4, 4))
    np.testing.assert_allclose(baseline_norm("rain", F, np.zeros((4, 4, 4))).data,
                               T.instance_norm(F).data, atol=1e-12)


def test_instance_baseline_on_constant_input():
    assert not baseline_norm("instance", np.full((2, 3, 2, 2, 2), 7.0)).data.any()


def test_baseline_batch_equals_instance_for_one_sample(float64, rng):
    F = rng.standard_normal((1, 3, 4, 4, 4))
    np.testing.assert_allclose(baseline_norm("batch", F).data, baseline_norm("instance", F).data, atol=1e-12)


def test_norm_layer_dispatch(rng):
    F = rng.standard_normal((1, 2, 4, 4, 4)).astype(np.float32)
    M = np.zeros((4, 4, 4), dtype=bool)
    M[1:3, 1:3, 1:3] = True
    p = ArhParams.init(2, rng)
    np.testing.assert_array_equal(NormLayer("arh", p)(F, M).data, arh_forward(F, M, p).data)
    np.testing.assert_array_equal(NormLayer("instance")(F, M).data, T.instance_norm(F).data)
    with pytest.raises(ArhnetError):
        NormLayer("layer")
    with pytest.raises(ArhnetError):
        NormLayer("arh")
    with pytest.raises(ArhnetError):
        baseline_norm("group", F, M)


def test_arh_params_named_round_trip(rng):
    p = ArhParams.init(3, rng)
    named = p.named_parameters("dec0.norm1")
    assert len(named) == 12
    assert named["dec0.norm1.attn_fuse.weight"].shape == (1, 3, 3, 3, 3)
    back = ArhParams.from_params(named, "dec0.norm1")
    assert back.gamma_f_conv.weight is p.gamma_f_conv.weight
    assert back.channels == 3
