import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabmtr import augment as aug
from tabmtr.losses import task_loss
from tabmtr.tensor import Tensor


@pytest.mark.parametrize("builder,coef,weight_on_y", [
    (aug.MixedTarget.cutmix, 0.25, 0.75),  # (1 - lam') y_i + lam' y_j
    (aug.MixedTarget.hiddenmix, 0.25, 0.25),  # lam y_i + (1 - lam) y_j
    (aug.MixedTarget.manifold_mixup, 0.25, 0.75),  # (1 - lam) y_i + lam y_j
    (aug.MixedTarget.cutmix, 0.0, 1.0),
    (aug.MixedTarget.hiddenmix, 1.0, 1.0),
    (aug.MixedTarget.manifold_mixup, 1.0, 0.0),
])
def test_label_mixing_orientation(builder, coef, weight_on_y):
    t = builder(np.array([1.0]), np.array([0.0]), coef)
    assert t.weight == weight_on_y
    # regression target = weight * y_i + (1 - weight) * y_j
    pred = Tensor(np.array([0.0]))
    expected = weight_on_y ** 2
    assert aug.mixed_loss(pred, t, "regression").item() == pytest.approx(expected)


def test_classification_mixed_loss_weights_the_two_losses():
    logits = Tensor(np.array([[0.3], [-1.2]]))
    ya, yb = np.array([1, 0]), np.array([0, 0])
    t = aug.MixedTarget.hiddenmix(ya, yb, 0.3)
    expected = 0.3 * task_loss(logits, ya, "binary").item() + 0.7 * task_loss(logits, yb, "binary").item()
    assert aug.mixed_loss(logits, t, "binary").item() == pytest.approx(expected, rel=1e-12)


def test_mtr_identity_and_full_mask_are_exact():
    rng = np.random.default_rng(0)
    tokens = Tensor(rng.normal(size=(6, 5, 4)))
    mask_token = Tensor(rng.normal(size=4))
    out, mask = aug.mtr_after_bias(tokens, 0.0, mask_token, rng)
    assert not mask.any()
    np.testing.assert_array_equal(out.data, tokens.data)
    out, mask = aug.mtr_after_bias(tokens, 1.0, mask_token, rng)
    assert mask.all()
    np.testing.assert_array_equal(out.data, np.broadcast_to(mask_token.data, tokens.shape))


def test_mtr_masks_independently_per_sample_unless_shared():
    rng = np.random.default_rng(0)
    tokens = Tensor(np.zeros((64, 10, 2)))
    _, mask = aug.mtr_after_bias(tokens, 0.5, Tensor(np.ones(2)), rng)
    assert len({m.tobytes() for m in mask}) > 1
    assert abs(mask.mean() - 0.5) < 0.05
    _, shared = aug.mtr_after_bias(tokens, 0.5, Tensor(np.ones(2)), rng, shared=True)
    assert all(np.array_equal(row, shared[0]) for row in shared)


def test_mtr_rejects_bad_probability():
    with pytest.raises(ValueError):
        aug.mtr_after_bias(Tensor(np.zeros((1, 2, 2))), 1.5, Tensor(np.zeros(2)), np.random.default_rng(0))


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(1, 12), st.integers(0, 6), st.integers(0, 10_000))
def test_cutmix_swap_count_and_realised_fraction(lam, kn, kc, seed):
    rng = np.random.default_rng(seed)
    b = 5
    x_num, x_cat = rng.normal(size=(b, kn)), rng.integers(0, 4, size=(b, kc))
    partner = np.roll(np.arange(b), 2)
    new_num, new_cat, lam_prime, chosen = aug.cutmix_batch(x_num, x_cat, partner, 1.0, rng, lam=lam)
    k = kn + kc
    n = math.floor(lam * k)
    assert np.all(chosen.sum(axis=1) == n)
    assert lam_prime == n / k
    merged_new = np.concatenate([new_num, new_cat], axis=1)
    merged_old = np.concatenate([x_num, x_cat], axis=1)
    np.testing.assert_array_equal(merged_new[chosen], merged_old[partner][chosen])
    np.testing.assert_array_equal(merged_new[~chosen], merged_old[~chosen])


def test_cutmix_pair_returns_realised_fraction():
    rng = np.random.default_rng(1)
    mixed, lp = aug.cutmix_pair(np.zeros(7), np.ones(7), 1.0, rng, lam=0.5)
    assert mixed.sum() == 3 and lp == 3 / 7


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(1, 6), st.integers(1, 16), st.integers(0, 10_000))
def test_hiddenmix_rows_identical_with_exact_ones(lam, k, d, seed):
    rng = np.random.default_rng(seed)
    ti, tj = rng.normal(size=(k, d)), rng.normal(size=(k, d))
    mixed, lam_out, S = aug.hiddenmix_pair(ti, tj, 1.0, rng, lam=lam)
    assert lam_out == lam
    assert np.all(S == S[0])
    assert S[0].sum() == math.floor(lam * d)
    np.testing.assert_array_equal(mixed, np.where(S == 1, ti, tj))


def test_hiddenmix_batch_takes_own_values_where_s_is_one():
    rng = np.random.default_rng(2)
    tokens = Tensor(rng.normal(size=(4, 3, 8)))
    partner = np.array([1, 0, 3, 2])
    mixed, lam, s = aug.hiddenmix_batch(tokens, partner, 1.0, rng, lam=0.5)
    assert np.all(s.sum(axis=1) == 4)
    expect = np.where(s[:, None, :], tokens.data, tokens.data[partner])
    np.testing.assert_array_equal(mixed.data, expect)


def test_manifold_mixup_orientation():
    mixed, lam = aug.manifold_mixup_pair(np.zeros(3), np.ones(3), 1.0, np.random.default_rng(0), lam=0.2)
    np.testing.assert_allclose(mixed, 0.2)  # (1 - lam) c_i + lam c_j


def test_scarf_values_come_from_training_marginals():
    rng = np.random.default_rng(0)
    train_num, train_cat = rng.normal(size=(30, 4)), rng.integers(0, 5, size=(30, 2))
    marg = aug.ColumnMarginals.from_train(train_num, train_cat)
    x_num, x_cat = rng.normal(size=(50, 4)) + 100, rng.integers(10, 20, size=(50, 2))
    out_num, out_cat = aug.scarf_corrupt(x_num, x_cat, 1.0, marg, rng)
    for j in range(4):
        assert set(out_num[:, j]) <= set(train_num[:, j])
    for j in range(2):
        assert set(out_cat[:, j]) <= set(train_cat[:, j])
    same_num, same_cat = aug.scarf_corrupt(x_num, x_cat, 0.0, marg, rng)
    np.testing.assert_array_equal(same_num, x_num)
    np.testing.assert_array_equal(same_cat, x_cat)


def test_scarf_mixed_cells_keep_column_identity():
    rng = np.random.default_rng(3)
    train_num = np.tile(np.arange(4.0), (10, 1))  # column j only ever holds j
    marg = aug.ColumnMarginals.from_train(train_num, np.zeros((10, 0), dtype=np.int64))
    out, _ = aug.scarf_corrupt(np.full((20, 4), -1.0), np.zeros((20, 0), dtype=np.int64), 0.5, marg, rng)
    for j in range(4):
        assert set(out[:, j]) <= {-1.0, float(j)}


def test_beta_sampling_moments():
    rng = np.random.default_rng(0)
    for alpha in (0.2, 1.0, 2.0):
        draws = np.array([aug.sample_lambda(alpha, rng) for _ in range(20_000)])
        assert abs(draws.mean() - 0.5) < 0.01
        assert abs(draws.var() - 1 / (4 * (2 * alpha + 1))) < 0.01


def test_batch_of_one_is_not_mixed():
    assert aug.pair_within_batch(1, np.random.default_rng(0)) is None
    p = aug.pair_within_batch(5, np.random.default_rng(0))
    assert sorted(p) == list(range(5))


@pytest.mark.parametrize("method,param", [("mtr", 1.2), ("scarf", None), ("cutmix", 0.0), ("hiddenmix", -1.0)])
def test_spec_validation(method, param):
    with pytest.raises(ValueError):
        aug.AugmentationSpec(method, param)


def test_aliases():
    assert aug.AugmentationSpec("mtr", 0.3).method == "mtr_after_bias"
    assert aug.AugmentationSpec("w/o DA").method == "none"
    with pytest.raises(ValueError):
        aug.AugmentationSpec("mixup", 1.0)


def test_every_op_increments_the_call_counter():
    rng = np.random.default_rng(0)
    before = sum(aug.CALLS.values())
    aug.cutmix_pair(np.zeros(3), np.ones(3), 1.0, rng)
    aug.manifold_mixup_pair(np.zeros(3), np.ones(3), 1.0, rng)
    assert sum(aug.CALLS.values()) == before + 2
