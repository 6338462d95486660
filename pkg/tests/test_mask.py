"""Tests for mixture-mask construction, gradients, and bookkeeping."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmmlab.fileio import FormatError
from gmmlab.mask import (
    DEFAULT_EPS,
    ElementwiseMask,
    GaussianKernel,
    GmmMaskBank,
    elm_new,
    elm_param_count,
    gmm_param_count,
    init_kernels,
    load_mask_csv,
    mask_param_grads,
    offset_of,
    save_mask_csv,
    unfold_mask,
    weight_matrix,
)
from gmmlab.numerics import Rng

from helpers import rel_err

FIG3_KERNELS = [GaussianKernel(0.6, 2.0), GaussianKernel(-0.8, 0.2)]


def random_kernels(seed: int, k: int) -> list[GaussianKernel]:
    rng = Rng(seed)
    return [GaussianKernel(rng.normal(0, 1.5), rng.normal(0, 3)) for _ in range(k)]


# -----------------------------------------------------------------------------
# weight_matrix
# -----------------------------------------------------------------------------


def test_weight_matrix_center_is_alpha_sum():
    for seed in range(5):
        kernels = random_kernels(seed, 4)
        w = weight_matrix(kernels, 5)
        assert w[4, 4] == pytest.approx(sum(k.alpha for k in kernels), abs=1e-12)


def test_weight_matrix_two_kernel_center():
    w = weight_matrix(FIG3_KERNELS, 8)
    assert abs(w[7, 7] - (-0.2)) < 1e-9


def test_weight_matrix_single_kernel_offset_value():
    w = weight_matrix([GaussianKernel(1.0, 1.0)], 3)
    expected = math.exp(-1.0 / (2.0 + 1e-6))
    assert abs(w[2, 3] - expected) < 1e-15  # offset (x=1, y=0) from center (2, 2)
    assert abs(expected - 0.60653) < 1e-5


def test_weight_matrix_side():
    for g in (1, 2, 5):
        assert weight_matrix([], g).shape == (2 * g - 1, 2 * g - 1)


# -----------------------------------------------------------------------------
# offset_of
# -----------------------------------------------------------------------------


def test_offset_of_identical_indices():
    o = offset_of(0, 0, 8)
    assert (o.dx, o.dy) == (0, 0)


def test_offset_of_hand_cases():
    assert offset_of(0, 9, 8) == offset_of(9, 0, 8)
    o = offset_of(0, 9, 8)
    assert (o.dx, o.dy) == (1, 1)
    o = offset_of(7, 8, 8)
    assert (o.dx, o.dy) == (7, 1)


def test_offset_of_out_of_range():
    with pytest.raises(ValueError):
        offset_of(0, 64, 8)
    with pytest.raises(ValueError):
        offset_of(-1, 0, 8)


@given(st.integers(1, 6), st.data())
@settings(max_examples=50, deadline=None)
def test_offset_of_bounds(g, data):
    i = data.draw(st.integers(0, g * g - 1))
    j = data.draw(st.integers(0, g * g - 1))
    o = offset_of(i, j, g)
    assert 0 <= o.dx <= g - 1
    assert 0 <= o.dy <= g - 1


# -----------------------------------------------------------------------------
# unfold_mask
# -----------------------------------------------------------------------------


def test_unfold_no_kernels_is_zero():
    assert np.array_equal(unfold_mask([], 3), np.zeros((9, 9)))


@pytest.mark.parametrize("g", [1, 2, 3, 4, 5, 6])
def test_unfold_matches_brute_force_oracle_exactly(g):
    # Oracle: the weight matrix indexed through an inline re-derivation of
    # the offset rule, entry by entry.
    for seed in range(4):
        kernels = random_kernels(100 * g + seed, 3)
        w = weight_matrix(kernels, g)
        m = unfold_mask(kernels, g)
        n = g * g
        for i in range(n):
            for j in range(n):
                x = abs(i % g - j % g)
                y = abs(i // g - j // g)
                assert m[i, j] == w[(g - 1) + y, (g - 1) + x]


def test_unfold_matches_direct_double_loop():
    # Independent re-evaluation of the mask formula in pure Python.
    g, eps = 3, DEFAULT_EPS
    kernels = random_kernels(7, 2)
    m = unfold_mask(kernels, g, eps)
    for i in range(9):
        for j in range(9):
            x = abs(i % g - j % g)
            y = abs(i // g - j // g)
            expected = sum(
                k.alpha * math.exp(-(x * x + y * y) / (2.0 * k.sigma**2 + eps))
                for k in kernels
            )
            assert abs(m[i, j] - expected) < 1e-12


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(0, 5))
@settings(max_examples=40, deadline=None)
def test_unfold_symmetry_exact(seed, g, k):
    m = unfold_mask(random_kernels(seed, k), g)
    assert np.array_equal(m, m.T)


def test_unfold_offset_tying():
    g = 4
    kernels = random_kernels(3, 3)
    m = unfold_mask(kernels, g)
    values = {}
    for i in range(g * g):
        for j in range(g * g):
            o = offset_of(i, j, g)
            key = (o.dx, o.dy)
            if key in values:
                assert m[i, j] == values[key]  # exactly equal, not approx
            else:
                values[key] = m[i, j]
    assert len(set(m.reshape(-1).tolist())) <= g * g


def test_unfold_monotone_decay_for_positive_kernel():
    g = 5
    m = unfold_mask([GaussianKernel(1.3, 1.7)], g)
    w = weight_matrix([GaussianKernel(1.3, 1.7)], g)
    # strictly decreasing in d^2 along increasing offsets
    vals = []
    for dx in range(g):
        for dy in range(g):
            vals.append((dx * dx + dy * dy, w[(g - 1) + dy, (g - 1) + dx]))
    vals.sort()
    for (d2a, va), (d2b, vb) in zip(vals, vals[1:]):
        if d2b > d2a:
            assert vb < va


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_sigma_sign_irrelevant(seed):
    rng = Rng(seed)
    alpha, sigma = rng.normal(0, 2), rng.normal(0, 5)
    g = 3
    a = unfold_mask([GaussianKernel(alpha, sigma)], g)
    b = unfold_mask([GaussianKernel(alpha, -sigma)], g)
    assert np.array_equal(a, b)


def test_unfold_sigma_zero_guarded_by_eps():
    m = unfold_mask([GaussianKernel(1.0, 0.0)], 3)
    assert np.all(np.isfinite(m))
    assert m[0, 0] == 1.0  # center survives
    assert m[0, 1] == 0.0  # one step away underflows to zero


# -----------------------------------------------------------------------------
# mask_param_grads
# -----------------------------------------------------------------------------


def test_mask_grads_single_diagonal_upstream():
    kernels = random_kernels(11, 3)
    upstream = np.zeros((9, 9))
    upstream[4, 4] = 1.0  # a diagonal entry: offset (0, 0), d^2 = 0
    grads = mask_param_grads(kernels, 3, DEFAULT_EPS, upstream)
    for dalpha, dsigma in grads:
        assert dalpha == pytest.approx(1.0, abs=1e-15)
        assert dsigma == 0.0


def test_mask_grads_zero_upstream():
    grads = mask_param_grads(random_kernels(12, 2), 3, DEFAULT_EPS, np.zeros((9, 9)))
    for dalpha, dsigma in grads:
        assert dalpha == 0.0
        assert dsigma == 0.0


def test_mask_grads_shape_check():
    with pytest.raises(ValueError, match="upstream"):
        mask_param_grads(random_kernels(1, 1), 3, DEFAULT_EPS, np.zeros((4, 4)))


@pytest.mark.parametrize("g", [2, 3, 4])
@pytest.mark.parametrize("k", [1, 3, 5])
def test_mask_grads_match_finite_differences(g, k):
    # 12 seeds x 9 parametrizations = 108 random trials.  Widths stay away
    # from zero: near sigma == 0 the mask underflows and the true gradient
    # drops below what central differences can resolve.
    h = 1e-5
    for seed in range(12):
        rng = Rng(g * 1000 + k * 100 + seed)
        kernels = [
            GaussianKernel(
                rng.normal(0, 1.5),
                (0.5 + 3.0 * rng.uniform()) * (1.0 if rng.uniform() < 0.5 else -1.0),
            )
            for _ in range(k)
        ]
        n = g * g
        upstream = rng.normals(n * n).reshape(n, n)
        grads = mask_param_grads(kernels, g, DEFAULT_EPS, upstream)

        def loss(kern):
            return float((unfold_mask(kern, g) * upstream).sum())

        for idx, (dalpha, dsigma) in enumerate(grads):
            ka = [GaussianKernel(kk.alpha + (h if ii == idx else 0.0), kk.sigma)
                  for ii, kk in enumerate(kernels)]
            kb = [GaussianKernel(kk.alpha - (h if ii == idx else 0.0), kk.sigma)
                  for ii, kk in enumerate(kernels)]
            num = (loss(ka) - loss(kb)) / (2 * h)
            assert rel_err(dalpha, num) < 1e-6
            sa = [GaussianKernel(kk.alpha, kk.sigma + (h if ii == idx else 0.0))
                  for ii, kk in enumerate(kernels)]
            sb = [GaussianKernel(kk.alpha, kk.sigma - (h if ii == idx else 0.0))
                  for ii, kk in enumerate(kernels)]
            num = (loss(sa) - loss(sb)) / (2 * h)
            assert rel_err(dsigma, num) < 1e-6


# -----------------------------------------------------------------------------
# parameter counts
# -----------------------------------------------------------------------------


def test_gmm_param_count_published_deltas():
    assert gmm_param_count(5, 1, 15) == 150
    assert gmm_param_count(8, 1, 9) == 144


def test_gmm_param_count_zero_kernels():
    assert gmm_param_count(0, 4, 12) == 0


def test_elm_param_count_published_deltas():
    assert elm_param_count(64, 9) == 36_864
    assert elm_param_count(64, 15) == 61_440


def test_elm_param_count_zero():
    assert elm_param_count(0, 3) == 0


def test_param_count_negative_rejected():
    with pytest.raises(ValueError):
        gmm_param_count(-1, 1, 1)
    with pytest.raises(ValueError):
        elm_param_count(-2, 1)


# -----------------------------------------------------------------------------
# elementwise mask
# -----------------------------------------------------------------------------


def test_elm_new_default_ones():
    m = elm_new(2)
    assert np.array_equal(m.values, np.ones((2, 2)))


def test_elm_new_count():
    assert elm_new(64).values.size == 4096


def test_elm_new_rejects_empty():
    with pytest.raises(ValueError):
        elm_new(0)


# -----------------------------------------------------------------------------
# kernel init
# -----------------------------------------------------------------------------


def test_init_kernels_empty():
    assert init_kernels(Rng(0), 0) == []


def test_init_kernels_degenerate_stds():
    kernels = init_kernels(Rng(0), 3, std_alpha=0.0, std_sigma=0.0)
    assert all(k.alpha == 0.0 and k.sigma == 10.0 for k in kernels)


def test_init_kernels_moments():
    kernels = init_kernels(Rng(1), 10_000)
    alphas = np.array([k.alpha for k in kernels])
    sigmas = np.array([k.sigma for k in kernels])
    assert abs(alphas.mean()) < 0.1
    assert abs(alphas.std() - 2.0) < 0.1
    assert abs(sigmas.mean() - 10.0) < 0.5
    assert abs(sigmas.std() - 10.0) < 0.5


def test_init_kernels_negative_count():
    with pytest.raises(ValueError):
        init_kernels(Rng(0), -1)


# -----------------------------------------------------------------------------
# GmmMaskBank
# -----------------------------------------------------------------------------


def test_bank_shapes_and_counts():
    bank = GmmMaskBank.init(Rng(0), layers=3, heads=4, kernels_per_mask=5, grid=4)
    assert bank.alpha.shape == (3, 4, 5)
    assert bank.param_count() == gmm_param_count(5, 4, 3)
    shared = GmmMaskBank.init(Rng(0), layers=3, heads=4, kernels_per_mask=5, grid=4,
                              shared_heads=True)
    assert shared.alpha.shape == (3, 1, 5)
    assert shared.param_count() == gmm_param_count(5, 1, 3)


def test_bank_mask_for_shared_heads_identical():
    bank = GmmMaskBank.init(Rng(1), layers=1, heads=3, kernels_per_mask=2, grid=3,
                            shared_heads=True)
    assert np.array_equal(bank.mask_for(0, 0), bank.mask_for(0, 2))


def test_bank_validates_epsilon():
    with pytest.raises(ValueError, match="epsilon"):
        GmmMaskBank(layers=1, slots=1, kernels_per_mask=1, grid=2,
                    alpha=np.zeros((1, 1, 1)), sigma=np.zeros((1, 1, 1)), epsilon=0.0)


def test_bank_validates_shapes():
    with pytest.raises(ValueError, match="shape"):
        GmmMaskBank(layers=2, slots=1, kernels_per_mask=1, grid=2,
                    alpha=np.zeros((1, 1, 1)), sigma=np.zeros((1, 1, 1)))


# -----------------------------------------------------------------------------
# CSV round trip
# -----------------------------------------------------------------------------


def test_mask_csv_roundtrip_bit_exact(tmp_path):
    m = unfold_mask(FIG3_KERNELS, 4)
    path = str(tmp_path / "mask.csv")
    save_mask_csv(path, m)
    assert np.array_equal(load_mask_csv(path), m)


def test_mask_csv_ragged_rejected(tmp_path):
    path = str(tmp_path / "bad.csv")
    path_obj = tmp_path / "bad.csv"
    path_obj.write_text("1.0,2.0\n3.0\n")
    with pytest.raises(FormatError, match="ragged"):
        load_mask_csv(path)


def test_mask_csv_unparseable_rejected(tmp_path):
    (tmp_path / "bad.csv").write_text("1.0,zap\n")
    with pytest.raises(FormatError):
        load_mask_csv(str(tmp_path / "bad.csv"))


def test_mask_csv_empty_rejected(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(FormatError, match="empty"):
        load_mask_csv(str(tmp_path / "empty.csv"))


def test_elementwise_mask_side():
    m = ElementwiseMask(values=np.ones((5, 5)))
    assert m.side == 5
