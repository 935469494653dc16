import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.cluster import KMeans, kmeans_plusplus

from nucleo.features import FeatureMap
from nucleo.mixture import (COEF_FLOOR, CompositionalMixture, NucleusCrop, cluster_crops,
                            learn_mixture, masked_log_likelihood, measure_nucleus_geometry,
                            mixture_score, position_loglik)
from nucleo.vmf import VmfKernelBank

SIGMA = 30.0


def ellipse_mask(long_axis, short_axis, theta=0.0, size=41):
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    c = (size - 1) / 2
    dx, dy = xx - c, yy - c
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / (long_axis / 2)) ** 2 + (v / (short_axis / 2)) ** 2 <= 1.0


def orth_bank(K=4, D=6, bg=None):
    kernels = np.eye(D)[:K]
    fg = tuple(k for k in range(K) if k != bg) if bg is not None else ()
    return VmfKernelBank(kernels, SIGMA, bg, fg)


def fm_from_kernels(bank, idx):
    idx = np.asarray(idx)
    vectors = bank.kernels[idx]
    return FeatureMap(vectors, np.ones(idx.shape, dtype=bool))


def crop(fm, long_axis=10.0, short_axis=8.0):
    return NucleusCrop(fm, (0, 0, 1, 1), long_axis, short_axis, 0.0)


def floor_normalize(a):
    a = np.maximum(a, COEF_FLOOR)
    return a / a.sum(axis=-1, keepdims=True)


# geometry ---------------------------------------------------------------------

def test_axis_aligned_ellipse():
    long_axis, short_axis, theta = measure_nucleus_geometry(ellipse_mask(21, 11))
    assert abs(long_axis - 21) <= 1 and abs(short_axis - 11) <= 1
    assert abs(theta) <= 0.05


def test_circle_is_round():
    long_axis, short_axis, _ = measure_nucleus_geometry(ellipse_mask(16, 16))
    assert long_axis / short_axis < 1.05


def test_rotated_ellipse_orientation():
    _, _, theta = measure_nucleus_geometry(ellipse_mask(21, 11, math.pi / 6))
    assert abs(theta - math.pi / 6) <= 0.05


def test_intensity_region_is_otsu_binarized():
    mask = ellipse_mask(21, 11)
    img = np.where(mask, 0.8, 0.1) + np.random.default_rng(0).normal(0, 0.01, mask.shape)
    long_axis, short_axis, _ = measure_nucleus_geometry(img)
    assert abs(long_axis - 21) <= 1 and abs(short_axis - 11) <= 1


def test_empty_foreground_falls_back_to_box():
    assert measure_nucleus_geometry(np.full((7, 12), 0.5)) == (12.0, 7.0, 0.0)


# clustering -------------------------------------------------------------------

def test_two_sizes_split():
    rng = np.random.default_rng(0)
    pts = np.concatenate([10 + rng.uniform(-0.1, 0.1, (20, 2)), 20 + rng.uniform(-0.1, 0.1, (20, 2))])
    a = cluster_crops(pts, 2, seed=0)
    assert len(set(a[:20])) == 1 and len(set(a[20:])) == 1 and a[0] != a[20]


def test_single_cluster():
    assert np.all(cluster_crops(np.random.default_rng(1).random((9, 2)), 1) == 0)


def test_matches_reference_kmeans():
    rng = np.random.default_rng(4)
    pts = rng.uniform(8, 25, size=(60, 2))
    ours = cluster_crops(pts, 5, seed=3)
    init, _ = kmeans_plusplus(pts, 5, random_state=3)
    ref = KMeans(5, init=init, n_init=1, max_iter=100, tol=0.0, algorithm="lloyd").fit(pts)
    np.testing.assert_array_equal(ours, ref.labels_)


def test_too_few_crops():
    with pytest.raises(ValueError, match="lower"):
        cluster_crops(np.ones((3, 2)), 4)


# learning ---------------------------------------------------------------------

def test_single_datum_posterior():
    bank = orth_bank(4, bg=3)
    idx = np.random.default_rng(0).integers(0, 4, (5, 5))
    fm = fm_from_kernels(bank, idx)
    mix = learn_mixture([crop(fm)] * 3, np.zeros(3, int), bank, M=1, em_iters=0)
    logits = SIGMA * fm.vectors @ bank.kernels.T
    post = np.exp(logits - logits.max(axis=-1, keepdims=True))
    post /= post.sum(axis=-1, keepdims=True)
    np.testing.assert_allclose(mix.alphas[0], floor_normalize(post), atol=1e-9)
    np.testing.assert_array_equal(mix.nu, [1.0])


def test_inner_sweeps_against_direct_iteration():
    rng = np.random.default_rng(2)
    bank = VmfKernelBank(np.linalg.qr(rng.normal(size=(6, 3)))[0].T, 5.0, 2, (0, 1))
    crops = []
    for _ in range(4):
        v = rng.normal(size=(3, 3, 6))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        crops.append(crop(FeatureMap(v, np.ones((3, 3), bool))))
    mix = learn_mixture(crops, np.zeros(4, int), bank, M=1, em_iters=0)
    logits = np.stack([5.0 * c.features.vectors @ bank.kernels.T for c in crops])
    alpha = np.full((3, 3, 3), 1 / 3)
    for _ in range(5):
        joint = alpha[None] * np.exp(logits)
        alpha = floor_normalize((joint / joint.sum(axis=-1, keepdims=True)).mean(axis=0))
    np.testing.assert_allclose(mix.alphas[0], alpha, atol=1e-12)


def test_two_populations_separated():
    bank = orth_bank(3, bg=2)
    a = fm_from_kernels(bank, np.zeros((5, 5), int))
    b = fm_from_kernels(bank, np.ones((5, 5), int))
    crops = [crop(a)] * 10 + [crop(b)] * 10
    start = np.array([0] * 7 + [1] * 3 + [1] * 7 + [0] * 3)
    _, assignment, hist = learn_mixture(crops, start, bank, M=2, em_iters=3, return_history=True)
    assert len(set(assignment[:10])) == 1 and len(set(assignment[10:])) == 1
    assert assignment[0] != assignment[10]
    assert np.all(np.diff(hist) >= -1e-9)


@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(0, 3))
def test_normalization_and_mask_invariants(seed, M, em_iters):
    rng = np.random.default_rng(seed)
    bank = VmfKernelBank(np.linalg.qr(rng.normal(size=(5, 4)))[0].T, 10.0, 0, (1, 2, 3))
    crops = []
    for _ in range(6):
        v = rng.normal(size=(3, 3, 5))
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
        crops.append(crop(FeatureMap(v, np.ones((3, 3), bool))))
    start = np.arange(6) % M
    mix, _, hist = learn_mixture(crops, start, bank, M=M, em_iters=em_iters, return_history=True)
    np.testing.assert_allclose(mix.alphas.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(mix.alphas >= 0)
    assert abs(mix.nu.sum() - 1.0) < 1e-9
    np.testing.assert_allclose(mix.fg_masks, mix.alphas[..., [1, 2, 3]].sum(axis=-1), atol=1e-9)
    assert np.all(np.diff(hist) >= -1e-9)


# scoring ----------------------------------------------------------------------

def one_position_mixture(bank, P, i, k_star):
    alphas = np.zeros((1, P, P, bank.n_kernels))
    alphas[..., bank.background_index] = 1.0
    alphas[0, i[0], i[1]] = 0.0
    alphas[0, i[0], i[1], k_star] = 1.0
    return CompositionalMixture(alphas, np.ones(1), bank)


def test_single_position_identity():
    bank = orth_bank(4, bg=0)
    mix = one_position_mixture(bank, 3, (1, 2), 2)
    idx = np.zeros((3, 3), int)
    idx[1, 2] = 2
    assert masked_log_likelihood(fm_from_kernels(bank, idx), mix, 0) == pytest.approx(SIGMA, abs=1e-12)


def test_uniform_coefficients_direct_oracle():
    rng = np.random.default_rng(6)
    K, P = 4, 5
    bank = VmfKernelBank(np.linalg.qr(rng.normal(size=(7, K)))[0].T, SIGMA, 0, (1, 2, 3))
    mix = CompositionalMixture(np.full((1, P, P, K), 1 / K), np.ones(1), bank)
    v = rng.normal(size=(P, P, 7))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    valid = rng.random((P, P)) > 0.2
    v[~valid] = 0.0
    fm = FeatureMap(v, valid)
    num = den = 0.0
    for r in range(P):
        for c in range(P):
            w = mix.fg_masks[0, r, c]
            if valid[r, c]:
                ll = math.log(sum(math.exp(SIGMA * float(v[r, c] @ bank.kernels[k]))
                                  for k in range(K))) - math.log(K)
            else:
                ll = 0.0
            num += w * ll
            den += w
    assert abs(masked_log_likelihood(fm, mix, 0) - num / den) < 1e-12


def test_mask_weighting_semantics():
    rng = np.random.default_rng(9)
    bank = orth_bank(3, bg=0)
    base = floor_normalize(rng.random((3, 3, 3)))
    other = base.copy()
    other[0, 0] = [0.9, 0.05, 0.05]  # more background at one corner only
    mix = CompositionalMixture(np.stack([base, other]), np.full(2, 0.5), bank)
    fm = fm_from_kernels(bank, rng.integers(0, 3, (3, 3)))
    logits = SIGMA * fm.vectors @ bank.kernels.T
    for m in range(2):
        ll = np.log((mix.alphas[m] * np.exp(logits)).sum(axis=-1))
        w = mix.fg_masks[m]
        assert masked_log_likelihood(fm, mix, m) == pytest.approx((w * ll).sum() / w.sum(), abs=1e-12)
    # equal everywhere except the corner position
    assert np.array_equal(mix.fg_masks[0][1:], mix.fg_masks[1][1:])


def test_zero_mask_is_sentinel():
    bank = orth_bank(3, bg=0)
    alphas = np.zeros((1, 3, 3, 3))
    alphas[..., 0] = 1.0
    mix = CompositionalMixture(alphas, np.ones(1), bank)
    assert masked_log_likelihood(fm_from_kernels(bank, np.zeros((3, 3), int)), mix, 0) == -np.inf


def test_mixture_score_picks_matching_template():
    rng = np.random.default_rng(1)
    bank = orth_bank(6, bg=0)
    M, P = 5, 5
    dominant = rng.integers(1, 6, size=(M, P, P))
    alphas = floor_normalize(np.eye(6)[dominant] * 0.9 + 0.1 / 6)
    mix = CompositionalMixture(alphas, np.full(M, 1 / M), bank)
    best, score = mixture_score(fm_from_kernels(bank, dominant[3]), mix)
    assert best == 3
    assert score == pytest.approx(masked_log_likelihood(fm_from_kernels(bank, dominant[3]), mix, 3))


def test_mixture_score_single_and_ties():
    bank = orth_bank(3, bg=0)
    alphas = floor_normalize(np.random.default_rng(0).random((1, 3, 3, 3)))
    fm = fm_from_kernels(bank, np.ones((3, 3), int))
    one = CompositionalMixture(alphas, np.ones(1), bank)
    assert mixture_score(fm, one) == (0, masked_log_likelihood(fm, one, 0))
    same = CompositionalMixture(np.repeat(alphas, 4, axis=0), np.full(4, 0.25), bank)
    assert mixture_score(fm, same)[0] == 0


@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_constant_logit_shift_keeps_best_component(seed, shift):
    rng = np.random.default_rng(seed)
    alphas = floor_normalize(rng.random((4, 3, 3, 5)))
    masks = alphas[..., 1:].sum(axis=-1)
    logits = rng.normal(scale=5, size=(3, 3, 5))

    def scores(lg):
        return np.array([(masks[m] * position_loglik(lg, alphas[m])).sum() / masks[m].sum()
                         for m in range(4)])

    base, moved = scores(logits), scores(logits + shift)
    np.testing.assert_allclose(moved - base, shift, atol=1e-9)
    assert int(np.argmax(base)) == int(np.argmax(moved))


def test_mixture_validation():
    bank = orth_bank(3, bg=0)
    with pytest.raises(ValueError):
        CompositionalMixture(np.full((1, 3, 3, 3), 0.5), np.ones(1), bank)
    with pytest.raises(ValueError):
        CompositionalMixture(np.full((2, 3, 3, 3), 1 / 3), np.ones(2), bank)
