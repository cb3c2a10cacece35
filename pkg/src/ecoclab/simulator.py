"""Desk-scale teacher-student pseudo-label learning on synthetic grids.

A synthetic task is a Voronoi-partitioned H x W grid of class ids with one
Gaussian feature blob per class. Linear per-bit classifiers (code path) or a
linear softmax head (one-hot baseline) train by SGD on analytic gradients;
the pseudo-label phase uses an EMA teacher whose decoded classes can be
corrupted by uniform label noise to probe noise robustness of the two label
encodings under identical conditions.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .codebook import Codebook, separation_stats
from .decoding import decode_batch, pixel_confidence_batch, sigmoid
from .losses import LossConfig, ce_loss_batch, total_loss_batch
from .pseudolabel import hybrid_label_batch, image_quality_weight

NOISE_MODES = ("none", "teacher_flip")
QUALITY_MODES = ("image_weight", "threshold")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the step and offending value."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TaskConfig:
    n_classes: int = 8
    feature_dim: int = 8
    height: int = 64
    width: int = 64
    labeled_fraction: float = 1 / 16
    test_fraction: float = 0.25
    noise_scale: float = 1.0
    separation: float = 4.0

    def __post_init__(self):
        problems = []
        if self.n_classes < 2 or self.feature_dim < 2:
            problems.append("need n_classes >= 2 and feature_dim >= 2")
        if self.height < 2 or self.width < 2 or self.height * self.width < self.n_classes:
            problems.append("grid too small for the requested classes")
        if not 0 < self.labeled_fraction < 1 or not 0 < self.test_fraction < 1:
            problems.append("fractions must lie in (0, 1)")
        elif self.labeled_fraction + self.test_fraction >= 1:
            problems.append("labeled and test fractions leave no unlabeled pixels")
        if self.noise_scale <= 0 or self.separation <= 0:
            problems.append("noise_scale and separation must be positive")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass(frozen=True)
class SyntheticTask:
    config: TaskConfig
    seed: int
    grid: np.ndarray  # (H, W) int class ids
    features: np.ndarray  # (H*W, D)
    class_means: np.ndarray  # (N, D)
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def truth(self) -> np.ndarray:
        return self.grid.reshape(-1)


@dataclass(frozen=True)
class LinearBitModel:
    """Affine map from features to bit logits (or class scores)."""

    weights: np.ndarray  # (out_dim, D)
    biases: np.ndarray  # (out_dim,)

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights.T + self.biases


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1.0
    steps: int = 1500
    batch_pixels: int = 256
    ema_coeff: float = 0.999
    lambda_u: float = 1.0
    loss: LossConfig = field(default_factory=LossConfig)
    T: float = 0.95
    tau_prime: float = 0.95
    noise_eps: float = 0.0
    noise_mode: str = "none"
    quality_mode: str = "image_weight"
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        problems = []
        if self.learning_rate <= 0:
            problems.append("learning_rate must be positive")
        if self.steps < 0 or self.batch_pixels < 1 or self.log_every < 1:
            problems.append("steps must be >= 0 and batch_pixels, log_every >= 1")
        if not 0 < self.ema_coeff < 1:
            problems.append("ema_coeff must lie in (0, 1)")
        if self.lambda_u < 0:
            problems.append("lambda_u must be non-negative")
        if not 0.0 <= self.noise_eps < 1.0:
            problems.append("noise_eps must lie in [0, 1)")
        if self.noise_mode not in NOISE_MODES:
            problems.append(f"noise_mode must be one of {NOISE_MODES}")
        if self.quality_mode not in QUALITY_MODES:
            problems.append(f"quality_mode must be one of {QUALITY_MODES}")
        if self.seed < 0:
            problems.append("seed must be non-negative")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class RunMetrics:
    steps: list[int] = field(default_factory=list)
    sup_loss: list[float] = field(default_factory=list)
    unsup_loss: list[float] = field(default_factory=list)
    bit_error: list[float] = field(default_factory=list)
    class_error: list[float] = field(default_factory=list)
    difference_count: list[int] = field(default_factory=list)
    correction_count: list[int] = field(default_factory=list)
    final_accuracy: float = math.nan
    final_per_class_accuracy: np.ndarray | None = None
    final_miou: float = math.nan


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    per_class_accuracy: np.ndarray  # (N,), NaN where a class has no pixels
    miou: float
    confusion: np.ndarray  # (N, N) rows = truth


def code_length_rule(n_classes: int) -> int:
    """Rule-of-thumb code length: 10 log2(N), rounded to a multiple of 4."""
    raw = 10.0 * math.log2(n_classes)
    return max(4, int(4 * round(raw / 4.0)))


def make_task(config: TaskConfig, seed: int) -> SyntheticTask:
    """Build the grid, features, and disjoint labeled/unlabeled/test splits."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    rng = np.random.default_rng([int(seed), 0x7A5C])
    h, w, n = config.height, config.width, config.n_classes
    cells = h * w

    sites = rng.choice(cells, size=n, replace=False)
    site_rc = np.stack(divmod(sites, w), axis=1)  # (N, 2)
    rr, cc = np.divmod(np.arange(cells), w)
    d2 = (rr[:, None] - site_rc[None, :, 0]) ** 2 + (cc[:, None] - site_rc[None, :, 1]) ** 2
    grid = d2.argmin(axis=1).reshape(h, w)  # ties to the lower class id
    assert np.array_equal(np.unique(grid), np.arange(n)), "every class must appear"

    means = config.separation * rng.standard_normal((n, config.feature_dim))
    gaps = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=2)
    assert gaps[np.triu_indices(n, 1)].min() > 0, "class means must be distinct"
    features = means[grid.reshape(-1)] + config.noise_scale * rng.standard_normal(
        (cells, config.feature_dim)
    )

    perm = rng.permutation(cells)
    n_lab = max(1, round(cells * config.labeled_fraction))
    n_test = max(1, round(cells * config.test_fraction))
    return SyntheticTask(
        config=config,
        seed=int(seed),
        grid=grid,
        features=features,
        class_means=means,
        labeled_idx=perm[:n_lab],
        unlabeled_idx=perm[n_lab + n_test :],
        test_idx=perm[n_lab : n_lab + n_test],
    )


def inject_uniform_label_noise(
    labels: np.ndarray, n_classes: int, eps: float, rng: np.random.Generator | int
) -> np.ndarray:
    """Replace each label w.p. eps by a uniform draw over the other classes."""
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    labels = np.asarray(labels, dtype=np.int64)
    flip = rng.random(labels.shape) < eps
    draws = rng.integers(0, n_classes - 1, size=labels.shape)
    others = draws + (draws >= labels)  # uniform over classes != label
    return np.where(flip, others, labels)


@dataclass(frozen=True)
class BitNoiseModel:
    """Per-bit flip rates induced by uniform class-flip noise."""

    per_bit: np.ndarray  # (K,) exact expectation under the flip model
    surrogate: float  # coarse eps * (n + d) / (2n) figure for comparison


def exact_bit_noise(cb: Codebook, class_prior: np.ndarray, eps: float) -> BitNoiseModel:
    """Exact expected per-bit flip rate when classes flip uniformly w.p. eps.

    For bit k: eps * sum_c prior(c) * |{c' != c : bit k differs}| / (N - 1).
    """
    prior = np.asarray(class_prior, dtype=np.float64)
    if prior.shape != (cb.n_classes,):
        raise ValueError(f"prior must have shape ({cb.n_classes},)")
    if abs(prior.sum() - 1.0) > 1e-9 or (prior < 0).any():
        raise ValueError("prior must be a probability vector")
    m = cb.matrix.astype(np.float64)  # (N, K)
    ones = m.sum(axis=0)  # per-bit count of classes with bit 1
    # class with bit 1 differs from (N - ones) classes at this bit; bit 0 from `ones`
    differing = m * (cb.n_classes - ones) + (1.0 - m) * ones  # (N, K)
    per_bit = eps * (prior @ differing) / (cb.n_classes - 1)
    d_min = separation_stats(cb).d_min_row
    surrogate = eps * (cb.code_length + d_min) / (2.0 * cb.code_length)
    return BitNoiseModel(per_bit=per_bit, surrogate=surrogate)


def blend_probs_toward_code(probs: np.ndarray, code: np.ndarray, factor: float = 0.5) -> np.ndarray:
    """Noise propagation rule: pull probabilities toward a target code.

    Class-level corruption must reach the bit-wise label form somehow; this
    single rule (convex blend, default factor 0.5) is the one place to change
    that behavior.
    """
    return (1.0 - factor) * probs + factor * code


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def predict_classes(model: LinearBitModel, features: np.ndarray, codebook: Codebook | None) -> np.ndarray:
    """Decoded classes (code path) or argmax classes (one-hot path)."""
    logits = model.logits(features)
    if codebook is None:
        return logits.argmax(axis=1)
    classes, _ = decode_batch(codebook, sigmoid(logits))
    return classes


def evaluate(
    model: LinearBitModel,
    features: np.ndarray,
    truth: np.ndarray,
    n_classes: int,
    codebook: Codebook | None = None,
) -> EvalResult:
    """Exact confusion-matrix metrics: accuracy, per-class accuracy, mean IoU."""
    pred = predict_classes(model, features, codebook)
    return evaluate_predictions(pred, truth, n_classes)


def evaluate_predictions(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> EvalResult:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    accuracy = float(np.trace(confusion)) / max(1, truth.size)
    gt_count = confusion.sum(axis=1)
    per_class = np.full(n_classes, np.nan)
    seen = gt_count > 0
    per_class[seen] = np.diag(confusion)[seen] / gt_count[seen]
    tp = np.diag(confusion).astype(np.float64)
    union = gt_count + confusion.sum(axis=0) - tp
    present = union > 0  # classes absent from truth and predictions are skipped
    miou = float((tp[present] / union[present]).mean()) if present.any() else math.nan
    return EvalResult(
        accuracy=accuracy, per_class_accuracy=per_class, miou=miou, confusion=confusion
    )


def _init_model(rng: np.random.Generator, out_dim: int, feature_dim: int) -> LinearBitModel:
    return LinearBitModel(
        weights=0.01 * rng.standard_normal((out_dim, feature_dim)),
        biases=np.zeros(out_dim),
    )


def _teacher_labels_ecoc(cb, probs, cfg, rng_noise):
    """Hybrid pseudo-labels from (possibly corrupted) teacher bit probabilities."""
    if cfg.noise_mode == "teacher_flip":
        decoded, _ = decode_batch(cb, probs)
        corrupted = inject_uniform_label_noise(decoded, cb.n_classes, cfg.noise_eps, rng_noise)
        probs = blend_probs_toward_code(probs, cb.matrix[corrupted].astype(np.float64))
    labels = hybrid_label_batch(cb, probs, cfg.T)
    return labels, labels.pixel_confidence


def _teacher_labels_onehot(probs, n_classes, cfg, rng_noise):
    """Argmax pseudo-labels; noise blends toward the corrupted one-hot vector."""
    if cfg.noise_mode == "teacher_flip":
        decoded = probs.argmax(axis=1)
        corrupted = inject_uniform_label_noise(decoded, n_classes, cfg.noise_eps, rng_noise)
        probs = blend_probs_toward_code(probs, np.eye(n_classes)[corrupted])
    labels = probs.argmax(axis=1)
    return labels, probs.max(axis=1)


def _pixel_weights(confidence: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    if cfg.quality_mode == "image_weight":
        return np.full(confidence.shape, image_quality_weight(confidence, cfg.tau_prime))
    return (confidence > cfg.tau_prime).astype(np.float64)


def _run_training(
    task: SyntheticTask,
    cfg: TrainConfig,
    codebook: Codebook | None,
    use_pseudo: bool,
    state_callback: Callable[[int, LinearBitModel, LinearBitModel], None] | None = None,
) -> tuple[LinearBitModel, RunMetrics]:
    n = task.config.n_classes
    d = task.config.feature_dim
    out_dim = codebook.code_length if codebook is not None else n
    if codebook is not None and codebook.n_classes != n:
        raise ValueError("codebook does not match the task's class count")

    rng_init = np.random.default_rng([cfg.seed, 0])
    rng_sup = np.random.default_rng([cfg.seed, 1])
    rng_unsup = np.random.default_rng([cfg.seed, 2])
    rng_noise = np.random.default_rng([cfg.seed, 3])

    model = _init_model(rng_init, out_dim, d)
    weights, biases = model.weights.copy(), model.biases.copy()
    t_weights, t_biases = weights.copy(), biases.copy()

    truth = task.truth
    metrics = RunMetrics()
    run_pseudo = use_pseudo and cfg.lambda_u != 0 and task.unlabeled_idx.size > 0

    for step in range(cfg.steps):
        idx = task.labeled_idx[rng_sup.integers(0, task.labeled_idx.size, cfg.batch_pixels)]
        z = task.features[idx]
        y = truth[idx]
        logits = z @ weights.T + biases
        if codebook is not None:
            scalars, grads = total_loss_batch(logits, codebook.matrix[y], codebook, cfg.loss)
        else:
            scalars, grads = ce_loss_batch(logits, y)
        sup_loss = float(scalars.mean())
        gw = grads.T @ z / idx.size
        gb = grads.mean(axis=0)

        unsup_loss = math.nan
        bit_err = math.nan
        class_err = math.nan
        diff_count = 0
        corr_count = 0
        if run_pseudo:
            uidx = task.unlabeled_idx[
                rng_unsup.integers(0, task.unlabeled_idx.size, cfg.batch_pixels)
            ]
            zu = task.features[uidx]
            yu = truth[uidx]
            teacher_logits = zu @ t_weights.T + t_biases
            if codebook is not None:
                probs = sigmoid(teacher_logits)
                labels, confidence = _teacher_labels_ecoc(codebook, probs, cfg, rng_noise)
                target_bits = labels.bits
                u_scalars, u_grads = total_loss_batch(
                    zu @ weights.T + biases, target_bits, codebook, cfg.loss
                )
                true_bits = codebook.matrix[yu]
                bit_err = float((target_bits != true_bits).mean())
                class_err = float((labels.source_class != yu).mean())
                diff_count = labels.difference_count
                corr_count = labels.correction_count
            else:
                probs = _softmax(teacher_logits)
                labels, confidence = _teacher_labels_onehot(probs, n, cfg, rng_noise)
                u_scalars, u_grads = ce_loss_batch(zu @ weights.T + biases, labels)
                class_err = float((labels != yu).mean())
                bit_err = 2.0 * class_err / n  # Hamming error of the one-hot codes
            pixel_w = _pixel_weights(confidence, cfg)
            unsup_loss = float((pixel_w * u_scalars).mean())
            gw += cfg.lambda_u * (u_grads * pixel_w[:, None]).T @ zu / uidx.size
            gb += cfg.lambda_u * (u_grads * pixel_w[:, None]).mean(axis=0)

        if not (math.isfinite(sup_loss) and (math.isnan(unsup_loss) or math.isfinite(unsup_loss))):
            raise TrainingDiverged(step, sup_loss if not math.isfinite(sup_loss) else unsup_loss)

        weights -= cfg.learning_rate * gw
        biases -= cfg.learning_rate * gb
        t_weights = cfg.ema_coeff * t_weights + (1.0 - cfg.ema_coeff) * weights
        t_biases = cfg.ema_coeff * t_biases + (1.0 - cfg.ema_coeff) * biases

        if state_callback is not None:
            state_callback(
                step,
                LinearBitModel(weights.copy(), biases.copy()),
                LinearBitModel(t_weights.copy(), t_biases.copy()),
            )
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            metrics.steps.append(step)
            metrics.sup_loss.append(sup_loss)
            metrics.unsup_loss.append(unsup_loss)
            metrics.bit_error.append(bit_err)
            metrics.class_error.append(class_err)
            metrics.difference_count.append(diff_count)
            metrics.correction_count.append(corr_count)

    model = LinearBitModel(weights=weights, biases=biases)
    final = evaluate(model, task.features[task.test_idx], truth[task.test_idx], n, codebook)
    metrics.final_accuracy = final.accuracy
    metrics.final_per_class_accuracy = final.per_class_accuracy
    metrics.final_miou = final.miou
    return model, metrics


def train_supervised(
    task: SyntheticTask,
    cfg: TrainConfig,
    codebook: Codebook | None = None,
    state_callback=None,
) -> tuple[LinearBitModel, RunMetrics]:
    """SGD on labeled pixels only. ``codebook=None`` selects the one-hot baseline."""
    return _run_training(task, cfg, codebook, use_pseudo=False, state_callback=state_callback)


def train_pseudo_label(
    task: SyntheticTask,
    cfg: TrainConfig,
    codebook: Codebook | None = None,
    state_callback=None,
) -> tuple[LinearBitModel, RunMetrics]:
    """Teacher-student training: supervised batches plus EMA-teacher pseudo-labels.

    With ``lambda_u == 0`` the unlabeled phase is skipped entirely and the
    result is bit-identical to train_supervised under the same seed.
    """
    return _run_training(task, cfg, codebook, use_pseudo=True, state_callback=state_callback)


@dataclass(frozen=True)
class PairedRun:
    seed: int
    code_accuracy: float
    onehot_accuracy: float
    code_miou: float
    onehot_miou: float


@dataclass(frozen=True)
class ComparisonSummary:
    runs: tuple[PairedRun, ...]
    code_median: float
    onehot_median: float
    wins: int
    ties: int
    losses: int

    @property
    def win_rate(self) -> float:
        return (self.wins + 0.5 * self.ties) / len(self.runs)

    def to_dict(self) -> dict:
        return {
            "runs": [
                {
                    "seed": r.seed,
                    "code_accuracy": r.code_accuracy,
                    "onehot_accuracy": r.onehot_accuracy,
                    "code_miou": r.code_miou,
                    "onehot_miou": r.onehot_miou,
                }
                for r in self.runs
            ],
            "code_median_accuracy": self.code_median,
            "onehot_median_accuracy": self.onehot_median,
            "median_gap": self.code_median - self.onehot_median,
            "wins": self.wins,
            "ties": self.ties,
            "losses": self.losses,
            "win_rate": self.win_rate,
        }


def compare_ecoc_vs_onehot(
    task_cfg: TaskConfig,
    train_cfg: TrainConfig,
    codebook: Codebook,
    seeds: list[int],
    max_workers: int = 1,
) -> ComparisonSummary:
    """Paired runs per seed: the code path and the one-hot baseline share the
    task and the training seed. Ties count as half a win."""
    if len(seeds) < 2:
        raise ValueError("need at least 2 seeds for a comparison")

    def one(seed: int) -> PairedRun:
        task = make_task(task_cfg, seed)
        cfg = replace(train_cfg, seed=seed)
        _, code_metrics = train_pseudo_label(task, cfg, codebook=codebook)
        _, onehot_metrics = train_pseudo_label(task, cfg, codebook=None)
        return PairedRun(
            seed=seed,
            code_accuracy=code_metrics.final_accuracy,
            onehot_accuracy=onehot_metrics.final_accuracy,
            code_miou=code_metrics.final_miou,
            onehot_miou=onehot_metrics.final_miou,
        )

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            runs = tuple(pool.map(one, seeds))
    else:
        runs = tuple(one(s) for s in seeds)
    code_acc = np.array([r.code_accuracy for r in runs])
    onehot_acc = np.array([r.onehot_accuracy for r in runs])
    return ComparisonSummary(
        runs=runs,
        code_median=float(np.median(code_acc)),
        onehot_median=float(np.median(onehot_acc)),
        wins=int((code_acc > onehot_acc).sum()),
        ties=int((code_acc == onehot_acc).sum()),
        losses=int((code_acc < onehot_acc).sum()),
    )


def write_pgm(path: str | Path, grid: np.ndarray, n_classes: int) -> None:
    """Plain-text PGM of a class-id grid, scaled to the full gray range."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError("grid must be 2-D")
    scale = 255 // max(1, n_classes - 1)
    img = (grid * scale).astype(np.int64)
    lines = ["P2", f"{grid.shape[1]} {grid.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in img]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
