"""Built-in property suites: gradient checks, the contrastive-loss identity,
the error-correction guarantee, and the bit-noise oracle. The CLI exposes
them as a self-test; the suites are also importable so a harness can run a
single suite or substitute a deliberately broken loss to prove the checks
bite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import codebook as cbk
from . import losses
from .decoding import decode
from .simulator import exact_bit_noise, inject_uniform_label_noise


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    detail: str


def check_gradients(
    loss_fns: dict[str, Callable[[np.ndarray], losses.LossValue]] | None = None,
    points: int = 25,
    dim: int = 8,
    tolerance: float = 1e-4,
    seed: int = 0,
) -> SuiteResult:
    """Finite-difference check of every analytic gradient at random logits."""
    rng = np.random.default_rng(seed)
    cb = cbk.generate_mmd(5, dim, 400, seed=seed)
    target = cb.matrix[0]
    cfg = losses.LossConfig()
    if loss_fns is None:
        loss_fns = {
            "bce": lambda x: losses.bce_loss(x, target),
            "pcd": lambda x: losses.pcd_loss(x, target),
            "pcc": lambda x: losses.pcc_loss(x, target, cb, cfg.tau),
            "total": lambda x: losses.total_loss(x, target, cb, cfg),
            "ce": lambda x: losses.ce_loss(x, 2),
        }
    worst_name, worst = "", 0.0
    for name, fn in loss_fns.items():
        for _ in range(points):
            x = rng.normal(0.0, 2.0, size=dim)
            err = losses.finite_diff_check(fn, x)
            if err > worst:
                worst_name, worst = name, err
    passed = worst < tolerance
    return SuiteResult(
        name="gradients",
        passed=passed,
        detail=f"max relative error {worst:.3e} ({worst_name}), tolerance {tolerance:g}",
    )


def check_contrastive_identity(
    instances: int = 1000, tolerance: float = 1e-9, seed: int = 1
) -> SuiteResult:
    """The softmax form and the paired-difference form must agree."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 9))
        k = int(rng.integers(3, 17))
        matrix = rng.integers(0, 2, size=(n, k), dtype=np.uint8)
        cb = cbk.Codebook(matrix=matrix) if len({tuple(r) for r in matrix}) == n else None
        if cb is None:
            continue
        x = rng.normal(0.0, 3.0, size=k)
        # half the targets are codebook rows, half arbitrary bit patterns
        if rng.random() < 0.5:
            target = matrix[int(rng.integers(0, n))]
        else:
            target = rng.integers(0, 2, size=k, dtype=np.uint8)
        tau = float(rng.uniform(0.1, 2.0))
        a = losses.pcc_loss(x, target, cb, tau).scalar
        b = losses.pcc_loss_rewritten(x, target, cb, tau)
        worst = max(worst, abs(a - b))
    return SuiteResult(
        name="contrastive-identity",
        passed=worst < tolerance,
        detail=f"max |softmax form - paired form| {worst:.3e}, tolerance {tolerance:g}",
    )


def check_error_correction(triples: int = 300, seed: int = 2) -> SuiteResult:
    """Flipping up to floor((d_min - 1)/2) bits must decode to the source class."""
    rng = np.random.default_rng(seed)
    failures = 0
    for t in range(triples):
        # K well below 2^(N-1)-1 keeps random column collisions rare enough
        # that a short search finds valid candidates.
        n = int(rng.integers(6, 9))
        k = int(rng.integers(8, 16))
        cb = cbk.generate_mmd(n, k, 600, seed=int(rng.integers(0, 2**31)))
        budget = cbk.separation_stats(cb).correctable_bits
        cls = int(rng.integers(0, n))
        flips = rng.choice(k, size=int(rng.integers(0, budget + 1)), replace=False)
        probs = cb.matrix[cls].astype(np.float64)
        probs[flips] = 1.0 - probs[flips]
        if decode(cb, probs).class_index != cls:
            failures += 1
    return SuiteResult(
        name="error-correction",
        passed=failures == 0,
        detail=f"{failures}/{triples} corrupted codewords failed to decode",
    )


def check_bit_noise(labels: int = 60_000, eps: float = 0.3, seed: int = 3) -> SuiteResult:
    """Empirical per-bit flip rates must match the exact expectation within 3 sigma."""
    rng = np.random.default_rng(seed)
    books = {
        "one-hot": cbk.one_hot(8),
        "complementary-pair": cbk.Codebook(
            matrix=np.array([[0] * 8, [1] * 8], dtype=np.uint8)
        ),
        "random": cbk.generate_mmd(6, 16, 500, seed=seed),
    }
    worst_sigma = 0.0
    for name, cb in books.items():
        classes = rng.integers(0, cb.n_classes, size=labels)
        prior = np.bincount(classes, minlength=cb.n_classes) / labels
        noisy = inject_uniform_label_noise(classes, cb.n_classes, eps, rng)
        flipped_bits = (cb.matrix[classes] != cb.matrix[noisy]).mean(axis=0)
        model = exact_bit_noise(cb, prior, eps)
        sigma = np.sqrt(model.per_bit * (1.0 - model.per_bit) / labels)
        sigma = np.maximum(sigma, 1e-12)
        worst_sigma = max(worst_sigma, float(np.max(np.abs(flipped_bits - model.per_bit) / sigma)))
    return SuiteResult(
        name="bit-noise",
        passed=worst_sigma <= 3.0,
        detail=f"worst deviation {worst_sigma:.2f} sigma over {len(books)} codebooks",
    )


def run_all(seed: int = 0) -> list[SuiteResult]:
    return [
        check_gradients(seed=seed),
        check_contrastive_identity(seed=seed + 1),
        check_error_correction(seed=seed + 2),
        check_bit_noise(seed=seed + 3),
    ]
