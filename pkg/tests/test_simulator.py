import dataclasses
import math

import numpy as np
import pytest

from ecoclab import codebook as cbk
from ecoclab import simulator as sim
from ecoclab.decoding import decode_batch
from ecoclab.losses import LossConfig


@pytest.fixture(scope="module")
def small_task():
    cfg = sim.TaskConfig(
        n_classes=4, feature_dim=8, height=32, width=32, separation=8.0, noise_scale=0.5
    )
    return sim.make_task(cfg, 0)


@pytest.fixture(scope="module")
def cb_4x7():
    return cbk.generate_mmd(4, 7, 20_000, seed=2)


# ------------------------------------------------------------------- make_task


def test_make_task_split_sizes(small_task):
    assert small_task.labeled_idx.size == 64  # 1024 / 16
    assert small_task.test_idx.size == 256
    assert small_task.unlabeled_idx.size == 1024 - 64 - 256
    all_idx = np.concatenate(
        [small_task.labeled_idx, small_task.unlabeled_idx, small_task.test_idx]
    )
    assert np.unique(all_idx).size == 1024  # splits are disjoint and cover the grid


def test_make_task_deterministic():
    cfg = sim.TaskConfig(n_classes=5, feature_dim=4, height=16, width=16)
    a = sim.make_task(cfg, 9)
    b = sim.make_task(cfg, 9)
    assert np.array_equal(a.grid, b.grid)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labeled_idx, b.labeled_idx)
    c = sim.make_task(cfg, 10)
    assert not np.array_equal(a.features, c.features)


def test_make_task_every_class_present(small_task):
    assert np.array_equal(np.unique(small_task.grid), np.arange(4))


def test_make_task_high_separation_is_nearly_separable():
    cfg = sim.TaskConfig(
        n_classes=4, feature_dim=8, height=24, width=24, separation=40.0, noise_scale=1.0
    )
    task = sim.make_task(cfg, 1)
    # nearest-mean classification should be essentially Bayes-perfect here
    d = np.linalg.norm(task.features[:, None, :] - task.class_means[None, :, :], axis=2)
    assert (d.argmin(axis=1) == task.truth).mean() > 0.999


def test_make_task_rejects_bad_dimensions():
    with pytest.raises(ValueError):
        sim.TaskConfig(n_classes=1)
    with pytest.raises(ValueError):
        sim.TaskConfig(labeled_fraction=0.6, test_fraction=0.6)


# ----------------------------------------------------------------- label noise


def test_noise_eps_zero_is_identity():
    labels = np.arange(10) % 3
    out = sim.inject_uniform_label_noise(labels, 3, 0.0, 7)
    assert np.array_equal(out, labels)


def test_noise_never_keeps_flipped_label_identical():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 5, 2000)
    out = sim.inject_uniform_label_noise(labels, 5, 0.999, rng)
    changed = out != labels
    assert changed.mean() > 0.98  # flips draw from the other classes only


def test_noise_flip_fraction_within_three_sigma():
    rng = np.random.default_rng(1)
    n = 100_000
    eps = 0.3
    labels = rng.integers(0, 8, n)
    out = sim.inject_uniform_label_noise(labels, 8, eps, rng)
    frac = (out != labels).mean()
    sigma = math.sqrt(eps * (1 - eps) / n)
    assert abs(frac - eps) < 3 * sigma


def test_noise_flips_are_uniform_over_other_classes():
    rng = np.random.default_rng(2)
    labels = np.zeros(120_000, dtype=np.int64)
    out = sim.inject_uniform_label_noise(labels, 4, 0.5, rng)
    flipped = out[out != 0]
    counts = np.bincount(flipped, minlength=4)[1:]
    expected = flipped.size / 3
    assert np.all(np.abs(counts - expected) < 4 * math.sqrt(expected))


# -------------------------------------------------------------- exact_bit_noise


def test_exact_bit_noise_one_hot_closed_form():
    model = sim.exact_bit_noise(cbk.one_hot(8), np.full(8, 1 / 8), 0.3)
    assert model.per_bit == pytest.approx(np.full(8, 0.3 * 2 / 8))


def test_exact_bit_noise_complementary_pair(complementary_pair):
    model = sim.exact_bit_noise(complementary_pair, np.array([0.4, 0.6]), 0.25)
    assert model.per_bit == pytest.approx(np.full(8, 0.25))
    assert model.surrogate == pytest.approx(0.25 * (8 + 8) / 16)


def test_exact_bit_noise_monte_carlo(cb_8x32):
    rng = np.random.default_rng(3)
    n = 100_000
    classes = rng.integers(0, 8, n)
    prior = np.bincount(classes, minlength=8) / n
    noisy = sim.inject_uniform_label_noise(classes, 8, 0.3, rng)
    empirical = (cb_8x32.matrix[classes] != cb_8x32.matrix[noisy]).mean(axis=0)
    model = sim.exact_bit_noise(cb_8x32, prior, 0.3)
    sigma = np.sqrt(model.per_bit * (1 - model.per_bit) / n)
    assert np.all(np.abs(empirical - model.per_bit) <= 3 * sigma)


def test_exact_bit_noise_validates_prior(cb_8x32):
    with pytest.raises(ValueError):
        sim.exact_bit_noise(cb_8x32, np.full(8, 0.2), 0.3)


# -------------------------------------------------------------------- evaluate


def test_evaluate_perfect_predictions():
    truth = np.array([0, 1, 2, 2, 1, 0])
    res = sim.evaluate_predictions(truth, truth, 3)
    assert res.accuracy == 1.0
    assert res.miou == 1.0
    assert res.per_class_accuracy == pytest.approx(np.ones(3))


def test_evaluate_constant_predictor_on_balanced_task():
    truth = np.repeat(np.arange(4), 25)
    pred = np.zeros(100, dtype=int)
    res = sim.evaluate_predictions(pred, truth, 4)
    assert res.accuracy == 0.25


def test_evaluate_hand_confusion_matrix():
    truth = np.array([0, 0, 0, 1, 1, 2])
    pred = np.array([0, 0, 1, 1, 0, 2])
    res = sim.evaluate_predictions(pred, truth, 3)
    assert np.array_equal(
        res.confusion, np.array([[2, 1, 0], [1, 1, 0], [0, 0, 1]])
    )
    assert res.accuracy == pytest.approx(4 / 6)
    assert res.per_class_accuracy == pytest.approx([2 / 3, 1 / 2, 1.0])
    # IoU: class0 2/(3+1), class1 1/(2+1), class2 1/1
    assert res.miou == pytest.approx((2 / 4 + 1 / 3 + 1) / 3)


def test_evaluate_skips_absent_classes():
    truth = np.array([0, 0, 1])
    pred = np.array([0, 0, 1])
    res = sim.evaluate_predictions(pred, truth, 3)
    assert math.isnan(res.per_class_accuracy[2])
    assert res.miou == 1.0


# -------------------------------------------------------------------- training


def test_supervised_fits_separable_task(small_task, cb_4x7):
    cfg = sim.TrainConfig(steps=800, seed=1)
    _, ecoc = sim.train_supervised(small_task, cfg, codebook=cb_4x7)
    _, onehot = sim.train_supervised(small_task, cfg, codebook=None)
    assert ecoc.final_accuracy > 0.95
    assert onehot.final_accuracy > 0.95


def test_zero_steps_is_near_chance(small_task, cb_4x7):
    cfg = sim.TrainConfig(steps=0, seed=1)
    _, metrics = sim.train_supervised(small_task, cfg, codebook=cb_4x7)
    majority = max(np.bincount(small_task.truth[small_task.test_idx])) / small_task.test_idx.size
    assert metrics.final_accuracy <= majority + 0.05  # no better than majority guessing


def test_same_seed_reproduces_run(small_task, cb_4x7):
    cfg = sim.TrainConfig(steps=150, seed=4)
    m1, r1 = sim.train_pseudo_label(small_task, cfg, codebook=cb_4x7)
    m2, r2 = sim.train_pseudo_label(small_task, cfg, codebook=cb_4x7)
    assert np.array_equal(m1.weights, m2.weights)
    assert np.array_equal(m1.biases, m2.biases)
    assert r1.sup_loss == r2.sup_loss
    assert r1.final_accuracy == r2.final_accuracy


def test_lambda_zero_is_bit_identical_to_supervised(small_task, cb_4x7):
    cfg = sim.TrainConfig(steps=200, seed=5, lambda_u=0.0)
    ms, _ = sim.train_supervised(small_task, cfg, codebook=cb_4x7)
    mp, _ = sim.train_pseudo_label(small_task, cfg, codebook=cb_4x7)
    assert np.array_equal(ms.weights, mp.weights)
    assert np.array_equal(ms.biases, mp.biases)


def test_teacher_is_ema_of_student_history(small_task, cb_4x7):
    cfg = sim.TrainConfig(steps=40, seed=6, ema_coeff=0.9, batch_pixels=32)
    students, teachers = [], []
    sim.train_pseudo_label(
        small_task,
        cfg,
        codebook=cb_4x7,
        state_callback=lambda s, stu, tea: (students.append(stu), teachers.append(tea)),
    )
    # teacher_before_step0 = init; recover it from the first update
    a = cfg.ema_coeff
    init_w = (teachers[0].weights - (1 - a) * students[0].weights) / a
    init_b = (teachers[0].biases - (1 - a) * students[0].biases) / a
    exp_w, exp_b = init_w, init_b
    for i, student in enumerate(students):
        exp_w = a * exp_w + (1 - a) * student.weights
        exp_b = a * exp_b + (1 - a) * student.biases
        assert np.abs(exp_w - teachers[i].weights).max() < 1e-10
        assert np.abs(exp_b - teachers[i].biases).max() < 1e-10


def test_supervised_loss_trailing_average_non_increasing(small_task, cb_4x7):
    cfg = sim.TrainConfig(steps=1200, seed=7, log_every=1)
    _, metrics = sim.train_supervised(small_task, cfg, codebook=cb_4x7)
    losses = np.array(metrics.sup_loss)
    window = 500
    trailing = np.convolve(losses, np.ones(window) / window, mode="valid")
    # separable task: each trailing window must not rise above its predecessor
    assert np.all(np.diff(trailing) <= 1e-3)
    assert trailing[-1] < trailing[0]


def test_divergence_aborts_with_report(small_task, cb_4x7):
    broken = dataclasses.replace(
        small_task, features=np.full_like(small_task.features, np.nan)
    )
    cfg = sim.TrainConfig(steps=5, seed=8)
    with pytest.raises(sim.TrainingDiverged) as info:
        sim.train_supervised(broken, cfg, codebook=cb_4x7)
    assert info.value.step == 0


def test_codebook_must_match_task(small_task, cb_8x32):
    with pytest.raises(ValueError, match="class count"):
        sim.train_supervised(small_task, sim.TrainConfig(steps=1), codebook=cb_8x32)


# --------------------------------------------------- noisy pseudo-label path


def test_teacher_flip_codewise_bit_rates_match_oracle(cb_8x32):
    # the code-wise label path flips bits exactly as the class-flip model says
    rng = np.random.default_rng(9)
    probs = rng.random((120_000, 32))
    decoded, _ = decode_batch(cb_8x32, probs)
    prior = np.bincount(decoded, minlength=8) / decoded.size
    corrupted = sim.inject_uniform_label_noise(decoded, 8, 0.3, np.random.default_rng(10))
    clean_bits = cb_8x32.matrix[decoded]
    noisy_bits = cb_8x32.matrix[corrupted]
    empirical = (clean_bits != noisy_bits).mean(axis=0)
    model = sim.exact_bit_noise(cb_8x32, prior, 0.3)
    sigma = np.sqrt(model.per_bit * (1 - model.per_bit) / decoded.size)
    assert np.all(np.abs(empirical - model.per_bit) <= 3 * sigma)


def test_blend_propagates_noise_to_both_forms(cb_4x7):
    probs = np.clip(cb_4x7.matrix[0] + np.array([0.1, -0.1, 0.05, -0.05, 0.1, -0.1, 0.1]), 0, 1)
    target = cb_4x7.matrix[2].astype(np.float64)
    blended = sim.blend_probs_toward_code(probs, target, factor=0.5)
    classes, _ = decode_batch(cb_4x7, blended[None, :])
    assert classes[0] == 2  # a half blend is enough to move the decision


def test_pseudo_metrics_counters_identity(small_task, cb_4x7):
    cfg = sim.TrainConfig(
        steps=120, seed=11, noise_eps=0.4, noise_mode="teacher_flip", log_every=1
    )
    _, metrics = sim.train_pseudo_label(small_task, cfg, codebook=cb_4x7)
    assert len(metrics.difference_count) == len(metrics.correction_count) == 120
    assert all(c <= d for c, d in zip(metrics.correction_count, metrics.difference_count))
    assert any(d > 0 for d in metrics.difference_count)


def test_quality_threshold_mode_runs(small_task, cb_4x7):
    cfg = sim.TrainConfig(steps=60, seed=12, quality_mode="threshold")
    _, metrics = sim.train_pseudo_label(small_task, cfg, codebook=cb_4x7)
    assert math.isfinite(metrics.final_accuracy)


# ------------------------------------------------------------------ comparison


def test_compare_structure_and_determinism(cb_4x7):
    task_cfg = sim.TaskConfig(
        n_classes=4, feature_dim=8, height=16, width=16, separation=6.0
    )
    train_cfg = sim.TrainConfig(steps=120, noise_eps=0.3, noise_mode="teacher_flip")
    a = sim.compare_ecoc_vs_onehot(task_cfg, train_cfg, cb_4x7, [1, 2, 3])
    b = sim.compare_ecoc_vs_onehot(task_cfg, train_cfg, cb_4x7, [1, 2, 3], max_workers=3)
    assert a.to_dict() == b.to_dict()  # worker count cannot change results
    assert a.wins + a.ties + a.losses == 3
    assert 0.0 <= a.win_rate <= 1.0
    assert {r.seed for r in a.runs} == {1, 2, 3}


def test_compare_needs_two_seeds(cb_4x7):
    with pytest.raises(ValueError):
        sim.compare_ecoc_vs_onehot(sim.TaskConfig(), sim.TrainConfig(), cb_4x7, [1])


# ---------------------------------------------------------------------- misc


def test_code_length_rule():
    assert sim.code_length_rule(8) == 32  # 10 log2(8) = 30 -> nearest multiple of 4
    assert sim.code_length_rule(19) == 44
    assert sim.code_length_rule(2) == 8


def test_write_pgm(tmp_path):
    grid = np.array([[0, 1], [2, 3]])
    path = tmp_path / "g.pgm"
    sim.write_pgm(path, grid, 4)
    lines = path.read_text().splitlines()
    assert lines[0] == "P2"
    assert lines[1] == "2 2"
    assert lines[2] == "255"
    assert lines[3] == "0 85"
