"""Calibration and ranking diagnostics.

Bit-level calibration treats every (pixel, bit) pair as one sample whose
confidence is max(p, 1-p) and whose correctness is whether the rounded bit
matches the target bit. ECE bins those samples uniformly on [0, 1]
(half-open bins, last bin closed) and sums the count-weighted gaps between
per-bin accuracy and mean confidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CalibSamples:
    """Flat arrays of per-sample confidence and 0/1 correctness."""

    confidence: np.ndarray
    correct: np.ndarray

    def __post_init__(self):
        conf = np.asarray(self.confidence, dtype=np.float64).ravel()
        corr = np.asarray(self.correct, dtype=np.float64).ravel()
        if conf.shape != corr.shape:
            raise ValueError("confidence and correctness arrays misaligned")
        object.__setattr__(self, "confidence", conf)
        object.__setattr__(self, "correct", corr)

    def __len__(self) -> int:
        return self.confidence.size


@dataclass(frozen=True)
class ReliabilityBins:
    """Per-bin aggregates: counts, mean confidence, empirical accuracy."""

    edges: np.ndarray  # (M+1,)
    counts: np.ndarray  # (M,)
    mean_confidence: np.ndarray  # (M,) zero where empty
    accuracy: np.ndarray  # (M,) zero where empty

    def ece(self) -> float:
        total = self.counts.sum()
        if total == 0:
            raise ValueError("no samples binned")
        gaps = np.abs(self.accuracy - self.mean_confidence)
        return float((self.counts / total * gaps).sum())


def bit_level_samples(probs: np.ndarray, target_bits: np.ndarray) -> CalibSamples:
    """One calibration sample per (pixel, bit): P*K samples for a (P, K) batch."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    t = np.atleast_2d(np.asarray(target_bits))
    if p.shape != t.shape:
        raise ValueError(f"misaligned batches: probs {p.shape} vs targets {t.shape}")
    confidence = np.maximum(p, 1.0 - p)
    correct = ((p >= 0.5).astype(np.uint8) == t.astype(np.uint8)).astype(np.float64)
    return CalibSamples(confidence=confidence, correct=correct)


def _bin_index(confidence: np.ndarray, n_bins: int) -> np.ndarray:
    # Interior edges as i/n_bins so a confidence written as the same decimal
    # lands in its half-open bin; confidence 1.0 lands in the last (closed) bin.
    inner = np.arange(1, n_bins) / n_bins
    return np.digitize(confidence, inner, right=False)


def reliability_bins(samples: CalibSamples, n_bins: int = 10) -> ReliabilityBins:
    if n_bins < 1:
        raise ValueError("need at least one bin")
    idx = _bin_index(samples.confidence, n_bins)
    counts = np.bincount(idx, minlength=n_bins).astype(np.int64)
    conf_sum = np.bincount(idx, weights=samples.confidence, minlength=n_bins)
    corr_sum = np.bincount(idx, weights=samples.correct, minlength=n_bins)
    nonzero = counts > 0
    mean_conf = np.zeros(n_bins)
    acc = np.zeros(n_bins)
    mean_conf[nonzero] = conf_sum[nonzero] / counts[nonzero]
    acc[nonzero] = corr_sum[nonzero] / counts[nonzero]
    return ReliabilityBins(
        edges=np.arange(n_bins + 1) / n_bins,
        counts=counts,
        mean_confidence=mean_conf,
        accuracy=acc,
    )


def ece(samples: CalibSamples, n_bins: int = 10) -> float:
    """Expected calibration error over uniform confidence bins."""
    if len(samples) == 0:
        raise ValueError("ece of an empty sample set")
    return reliability_bins(samples, n_bins).ece()


def topc_accuracy(ranked: np.ndarray, truth: np.ndarray, c_max: int) -> np.ndarray:
    """Fraction of pixels whose true class sits within the C nearest codewords.

    ``ranked`` is the (P, N) per-pixel class ranking by ascending distance.
    Returns one value per C in 1..c_max; non-decreasing, and 1 at C = N.
    """
    r = np.atleast_2d(np.asarray(ranked))
    t = np.asarray(truth).reshape(-1)
    if r.shape[0] != t.size:
        raise ValueError(f"misaligned batches: ranked {r.shape} vs truth {t.shape}")
    if not 1 <= c_max <= r.shape[1]:
        raise ValueError(f"c_max {c_max} outside 1..{r.shape[1]}")
    position = (r == t[:, None]).argmax(axis=1)
    return np.array([(position < c).mean() for c in range(1, c_max + 1)])
