import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecoclab import codebook as cbk
from ecoclab import losses
from ecoclab.pseudolabel import distinct_part


def random_valid_codebook(rng):
    while True:
        n = int(rng.integers(2, 9))
        k = int(rng.integers(3, 17))
        m = rng.integers(0, 2, size=(n, k), dtype=np.uint8)
        if len({tuple(r) for r in m}) == n:
            return cbk.Codebook(matrix=m)


# ------------------------------------------------------------------------ bce


def test_bce_saturated_identity():
    target = np.array([1, 0, 1, 1])
    logits = np.where(target == 1, 20.0, -20.0)
    assert losses.bce_loss(logits, target).scalar < 1e-6


def test_bce_zero_logits_give_ln2():
    for target in ([1, 0], [0, 0], [1, 1]):
        value = losses.bce_loss(np.zeros(2), np.array(target)).scalar
        assert value == pytest.approx(math.log(2))


def test_bce_hand_value():
    value = losses.bce_loss(np.array([1.0, -1.0]), np.array([1, 0]))
    assert value.scalar == pytest.approx(0.3132616875182228, rel=1e-12)
    # gradient (p - c)/K
    p = 1 / (1 + math.exp(-1))
    assert value.gradient == pytest.approx([(p - 1) / 2, (1 - p - 0) / 2])


def test_bce_finite_at_hard_labels():
    value = losses.bce_loss(np.array([900.0, -900.0]), np.array([0, 1]))
    assert math.isfinite(value.scalar)


def test_bce_minimized_only_at_target():
    target = np.array([1, 0, 1])
    aligned = losses.bce_loss(np.array([30.0, -30.0, 30.0]), target).scalar
    off = losses.bce_loss(np.array([30.0, 30.0, 30.0]), target).scalar
    assert aligned < 1e-6 < off


# ------------------------------------------------------------------------ pcd


def test_pcd_collinear_and_anticollinear():
    chat = np.array([1.0, -1.0, 1.0])
    target = np.array([1, 0, 1])
    assert losses.pcd_loss(3.7 * chat, target).scalar == pytest.approx(0.0, abs=1e-12)
    assert losses.pcd_loss(-0.4 * chat, target).scalar == pytest.approx(2.0, abs=1e-12)


def test_pcd_hand_value():
    value = losses.pcd_loss(np.array([1.0, 0.0]), np.array([1, 1]))
    assert value.scalar == pytest.approx(1 - 1 / math.sqrt(2), rel=1e-12)


def test_pcd_zero_norm_convention():
    value = losses.pcd_loss(np.zeros(4), np.array([1, 0, 1, 0]))
    assert value.scalar == 1.0
    assert np.array_equal(value.gradient, np.zeros(4))


# ------------------------------------------------------------------------ pcc


def test_pcc_complementary_pair_limit(complementary_pair):
    target = complementary_pair.matrix[1]
    chat = 2.0 * target - 1.0
    value = losses.pcc_loss(50.0 * chat, target, complementary_pair, 0.5)
    # cosine gap between the two poles is 2; scaled by 1/tau
    assert value.scalar == pytest.approx(math.log(1 + math.exp(-4)), rel=1e-9)


def test_pcc_orthogonal_logits_hit_uniform_value(cb_5x8):
    # logits orthogonal to every standardized codeword: project one out of span
    rng = np.random.default_rng(0)
    std = cb_5x8.standardized()
    x = rng.normal(size=cb_5x8.code_length)
    q, _ = np.linalg.qr(std.T)
    x = x - q @ (q.T @ x)
    assert np.abs(std @ x).max() < 1e-10
    target = cb_5x8.matrix[2]
    value = losses.pcc_loss(x, target, cb_5x8, 0.5)
    assert value.scalar == pytest.approx(math.log(1 + 4), rel=1e-9)


def test_pcc_zero_norm_convention(cb_5x8):
    value = losses.pcc_loss(np.zeros(8), cb_5x8.matrix[0], cb_5x8, 0.5)
    assert value.scalar == pytest.approx(math.log(1 + 4))
    assert np.array_equal(value.gradient, np.zeros(8))


def test_pcc_excludes_only_bit_identical_rows(cb_5x8):
    rng = np.random.default_rng(1)
    x = rng.normal(size=8)
    on_book = losses.pcc_loss(x, cb_5x8.matrix[0], cb_5x8, 0.5)
    off_bits = cb_5x8.matrix[0].copy()
    off_bits[0] ^= 1
    assert not any(np.array_equal(off_bits, row) for row in cb_5x8.matrix)
    off_book = losses.pcc_loss(x, off_bits, cb_5x8, 0.5)
    # off-codebook targets keep all N rows as negatives
    assert on_book.scalar != pytest.approx(off_book.scalar)


def test_contrastive_identity_on_random_instances():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(2000):
        cb = random_valid_codebook(rng)
        k = cb.code_length
        x = rng.normal(0, 3, size=k)
        if rng.random() < 0.5:
            target = cb.matrix[int(rng.integers(0, cb.n_classes))]
        else:
            target = rng.integers(0, 2, size=k, dtype=np.uint8)
        tau = float(rng.uniform(0.1, 2.0))
        a = losses.pcc_loss(x, target, cb, tau).scalar
        b = losses.pcc_loss_rewritten(x, target, cb, tau)
        worst = max(worst, abs(a - b))
    assert worst < 1e-9


def test_paired_difference_vanishes_outside_distinct_part():
    rng = np.random.default_rng(3)
    for _ in range(100):
        k = int(rng.integers(2, 12))
        c1 = rng.integers(0, 2, size=k, dtype=np.uint8)
        c2 = rng.integers(0, 2, size=k, dtype=np.uint8)
        diff = (2.0 * c2 - 1.0) - (2.0 * c1 - 1.0)
        off = distinct_part(c1, c2) == 0
        assert np.all(diff[off] == 0.0)
        assert np.all(diff[~off] != 0.0)


# ----------------------------------------------------------------- total & ce


def test_total_loss_reduces_to_bce_when_weights_vanish(cb_5x8):
    rng = np.random.default_rng(4)
    x = rng.normal(size=8)
    target = cb_5x8.matrix[1]
    cfg = losses.LossConfig(lambda1=0.0, lambda2=0.0, tau=0.5)
    total = losses.total_loss(x, target, cb_5x8, cfg)
    bce = losses.bce_loss(x, target)
    assert total.scalar == bce.scalar
    assert np.array_equal(total.gradient, bce.gradient)


def test_total_loss_is_exact_weighted_sum(cb_5x8):
    rng = np.random.default_rng(5)
    cfg = losses.LossConfig(lambda1=5.0, lambda2=2.0, tau=0.5)
    for _ in range(50):
        x = rng.normal(0, 2, size=8)
        target = cb_5x8.matrix[int(rng.integers(0, 5))]
        total = losses.total_loss(x, target, cb_5x8, cfg)
        parts = (
            losses.bce_loss(x, target),
            losses.pcd_loss(x, target),
            losses.pcc_loss(x, target, cb_5x8, cfg.tau),
        )
        expected = parts[0].scalar + 5.0 * parts[1].scalar + 2.0 * parts[2].scalar
        expected_grad = parts[0].gradient + 5.0 * parts[1].gradient + 2.0 * parts[2].gradient
        assert total.scalar == expected
        assert np.array_equal(total.gradient, expected_grad)


def test_ce_examples():
    assert losses.ce_loss(np.zeros(7), 3).scalar == pytest.approx(math.log(7))
    assert losses.ce_loss(np.array([50.0, 0.0, 0.0]), 0).scalar < 1e-6
    assert losses.ce_loss(np.array([1.0, 0.0, 0.0]), 0).scalar == pytest.approx(
        0.5514447139320511, rel=1e-12
    )


def test_ce_gradient_is_softmax_minus_onehot():
    scores = np.array([1.0, -2.0, 0.5])
    value = losses.ce_loss(scores, 2)
    softmax = np.exp(scores) / np.exp(scores).sum()
    expected = softmax - np.array([0, 0, 1.0])
    assert value.gradient == pytest.approx(expected, rel=1e-12)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        losses.LossConfig(lambda1=-1)
    with pytest.raises(ValueError):
        losses.LossConfig(tau=0.0)


# ------------------------------------------------------------ gradient checks


def test_finite_diff_all_losses(cb_5x8):
    rng = np.random.default_rng(6)
    cfg = losses.LossConfig()
    target = cb_5x8.matrix[0]
    fns = {
        "bce": lambda x: losses.bce_loss(x, target),
        "pcd": lambda x: losses.pcd_loss(x, target),
        "pcc": lambda x: losses.pcc_loss(x, target, cb_5x8, cfg.tau),
        "total": lambda x: losses.total_loss(x, target, cb_5x8, cfg),
        "ce": lambda x: losses.ce_loss(x, 2),
    }
    for name, fn in fns.items():
        worst = max(
            losses.finite_diff_check(fn, rng.normal(0, 2, size=8)) for _ in range(30)
        )
        assert worst < 1e-4, name


def test_finite_diff_near_collinear_pcd(cb_5x8):
    chat = 2.0 * cb_5x8.matrix[0] - 1.0
    x = 2.0 * chat + 0.05
    assert losses.finite_diff_check(lambda z: losses.pcd_loss(z, cb_5x8.matrix[0]), x) < 1e-4


def test_finite_diff_step_domain():
    with pytest.raises(ValueError):
        losses.finite_diff_check(lambda x: losses.ce_loss(x, 0), np.zeros(3), step=1e-2)


def test_finite_diff_detects_broken_gradient():
    def broken(x):
        good = losses.bce_loss(x, np.array([1, 0, 1]))
        return losses.LossValue(scalar=good.scalar, gradient=good.gradient * 1.05)

    err = losses.finite_diff_check(broken, np.array([0.3, -0.2, 0.8]))
    assert err > 1e-3


# ----------------------------------------------------------------- batch forms


def test_batch_losses_match_scalar_forms(cb_5x8):
    rng = np.random.default_rng(7)
    cfg = losses.LossConfig()
    logits = rng.normal(0, 2, size=(40, 8))
    targets = cb_5x8.matrix[rng.integers(0, 5, size=40)]
    sb, gb = losses.bce_loss_batch(logits, targets)
    sd, gd = losses.pcd_loss_batch(logits, targets)
    sk, gk = losses.pcc_loss_batch(logits, targets, cb_5x8, cfg.tau)
    stot, gtot = losses.total_loss_batch(logits, targets, cb_5x8, cfg)
    for i in range(40):
        assert sb[i] == pytest.approx(losses.bce_loss(logits[i], targets[i]).scalar, rel=1e-12)
        assert sd[i] == pytest.approx(losses.pcd_loss(logits[i], targets[i]).scalar, rel=1e-12)
        single = losses.pcc_loss(logits[i], targets[i], cb_5x8, cfg.tau)
        assert sk[i] == pytest.approx(single.scalar, rel=1e-12)
        assert gk[i] == pytest.approx(single.gradient, rel=1e-9, abs=1e-12)
        total = losses.total_loss(logits[i], targets[i], cb_5x8, cfg)
        assert stot[i] == pytest.approx(total.scalar, rel=1e-12)
        assert gtot[i] == pytest.approx(total.gradient, rel=1e-9, abs=1e-12)


def test_batch_ce_matches_scalar():
    rng = np.random.default_rng(8)
    scores = rng.normal(size=(30, 6))
    targets = rng.integers(0, 6, size=30)
    s, g = losses.ce_loss_batch(scores, targets)
    for i in range(30):
        single = losses.ce_loss(scores[i], int(targets[i]))
        assert s[i] == pytest.approx(single.scalar, rel=1e-12)
        assert g[i] == pytest.approx(single.gradient, rel=1e-12)


def test_batch_pcc_zero_norm_rows(cb_5x8):
    logits = np.zeros((2, 8))
    logits[1] = np.random.default_rng(9).normal(size=8)
    targets = cb_5x8.matrix[:2]
    s, g = losses.pcc_loss_batch(logits, targets, cb_5x8, 0.5)
    assert s[0] == pytest.approx(math.log(5))
    assert np.array_equal(g[0], np.zeros(8))
