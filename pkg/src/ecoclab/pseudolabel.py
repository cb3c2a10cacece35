"""Bit-wise, code-wise, and hybrid pseudo-labels with reliable-bit mining.

A bit-wise label rounds each predicted probability; a code-wise label is the
full codeword of the decoded class. The hybrid form keeps code-wise bits on a
mined reliability mask and bit-wise bits elsewhere. The mask grows a candidate
set down the decode ranking and keeps only bit positions shared by every
candidate, stopping once their mean confidence clears a threshold T.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .codebook import Codebook
from .decoding import (
    bit_confidence,
    pixel_confidence_batch,
    ranked_batch,
    soft_hamming_matrix,
)

FORMS = ("bitwise", "codewise", "hybrid")


@dataclass(frozen=True)
class PseudoCode:
    """A K-bit supervision target plus how it was formed."""

    bits: np.ndarray
    form: str
    mask: np.ndarray | None = None  # hybrid only
    source_class: int | None = None  # codewise and hybrid

    def __post_init__(self):
        if self.form not in FORMS:
            raise ValueError(f"unknown pseudo-label form {self.form!r}")
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=np.uint8))
        if self.mask is not None:
            object.__setattr__(self, "mask", np.asarray(self.mask, dtype=np.uint8))


@dataclass(frozen=True)
class HybridBatch:
    """Vectorized hybrid labels for a (P, K) probability batch."""

    bits: np.ndarray  # (P, K) hybrid bits
    mask: np.ndarray  # (P, K) reliability mask
    source_class: np.ndarray  # (P,) decoded class per pixel
    bitwise: np.ndarray  # (P, K)
    codewise: np.ndarray  # (P, K)
    pixel_confidence: np.ndarray  # (P,)

    @property
    def difference_count(self) -> int:
        """Bits where the two base label forms disagree."""
        return int((self.bitwise != self.codewise).sum())

    @property
    def correction_count(self) -> int:
        """Disagreeing bits that the mask resolves toward the code-wise form."""
        return int(((self.bitwise != self.codewise) & (self.mask == 1)).sum())


def bitwise_label(probs: np.ndarray) -> PseudoCode:
    """Round each bit probability; exact 0.5 rounds to 1."""
    bits = (np.asarray(probs, dtype=np.float64) >= 0.5).astype(np.uint8)
    return PseudoCode(bits=bits, form="bitwise")


def codewise_label(cb: Codebook, probs: np.ndarray) -> PseudoCode:
    """Codeword of the nearest class."""
    distances = soft_hamming_matrix(cb, probs)[0]
    cls = int(distances.argmin())
    return PseudoCode(bits=cb.matrix[cls].copy(), form="codewise", source_class=cls)


def shared_part(codewords: Iterable[np.ndarray] | Sequence[str]) -> np.ndarray:
    """Mask of positions where every codeword agrees."""
    rows = [
        np.array([int(c) for c in w], dtype=np.uint8) if isinstance(w, str) else np.asarray(w)
        for w in codewords
    ]
    if not rows:
        raise ValueError("shared_part of an empty codeword set")
    stacked = np.stack(rows)
    return (stacked.min(axis=0) == stacked.max(axis=0)).astype(np.uint8)


def distinct_part(c1: np.ndarray, c2: np.ndarray) -> np.ndarray:
    """Mask of positions where two codewords differ."""
    a, b = np.asarray(c1), np.asarray(c2)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return (1 - shared_part([a, b])).astype(np.uint8)


def mine_reliable_bits(
    cb: Codebook,
    probs: np.ndarray,
    threshold: float,
    distances: np.ndarray | None = None,
) -> np.ndarray:
    """Reliability mask of one pixel (reference per-pixel form).

    Walks classes in decode order, shrinking the mask to the bits shared by
    all candidates so far; stops once the mean bit confidence over the masked
    positions strictly exceeds ``threshold``, or the mask empties (an empty
    shared part has no defined mean and yields the all-zero mask).
    """
    if distances is None:
        distances = soft_hamming_matrix(cb, probs)[0]
    order = np.argsort(distances, kind="stable")
    q = bit_confidence(probs)
    mask = np.ones(cb.code_length, dtype=np.uint8)
    candidates: list[np.ndarray] = []
    for n in range(cb.n_classes):
        candidates.append(cb.matrix[order[n]])
        mask = shared_part(candidates)
        kept = mask == 1
        if not kept.any():
            break
        if q[kept].mean() > threshold:
            break
    return mask


def hybrid_label(cb: Codebook, probs: np.ndarray, threshold: float) -> PseudoCode:
    """Fuse code-wise bits on the mined mask with bit-wise bits elsewhere."""
    code = codewise_label(cb, probs)
    bits_soft = bitwise_label(probs)
    mask = mine_reliable_bits(cb, probs, threshold)
    fused = mask * code.bits + (1 - mask) * bits_soft.bits
    return PseudoCode(
        bits=fused.astype(np.uint8),
        form="hybrid",
        mask=mask,
        source_class=code.source_class,
    )


def mine_reliable_bits_batch(
    cb: Codebook,
    probs: np.ndarray,
    threshold: float,
    distances: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized mining over a (P, K) batch.

    Returns (mask (P, K), decoded class (P,)). Agrees exactly with
    mine_reliable_bits applied per pixel; the per-pixel form is kept as the
    reference implementation and the equivalence is under test.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if distances is None:
        distances = soft_hamming_matrix(cb, p)
    order = ranked_batch(distances)  # (P, N)
    sorted_codes = cb.matrix[order]  # (P, N, K)
    # Shared part after n+1 candidates: positions where the running min and
    # max over candidates coincide.
    cmin = np.minimum.accumulate(sorted_codes, axis=1)
    cmax = np.maximum.accumulate(sorted_codes, axis=1)
    shared = cmin == cmax  # (P, N, K) boolean
    counts = shared.sum(axis=2)  # (P, N)
    q = np.maximum(p, 1.0 - p)
    q_sum = np.einsum("pnk,pk->pn", shared, q)
    with np.errstate(invalid="ignore", divide="ignore"):
        q_mean = q_sum / counts
    stop = (counts == 0) | ((counts > 0) & (q_mean > threshold))
    stop[:, -1] = True  # the loop ends after N candidates regardless
    first = stop.argmax(axis=1)
    mask = shared[np.arange(p.shape[0]), first].astype(np.uint8)
    return mask, order[:, 0]


def hybrid_label_batch(cb: Codebook, probs: np.ndarray, threshold: float) -> HybridBatch:
    """Vectorized hybrid labels; see hybrid_label for single-pixel semantics."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    distances = soft_hamming_matrix(cb, p)
    mask, classes = mine_reliable_bits_batch(cb, p, threshold, distances=distances)
    codewise = cb.matrix[classes]
    bitwise = (p >= 0.5).astype(np.uint8)
    fused = (mask * codewise + (1 - mask) * bitwise).astype(np.uint8)
    return HybridBatch(
        bits=fused,
        mask=mask,
        source_class=classes,
        bitwise=bitwise,
        codewise=codewise,
        pixel_confidence=pixel_confidence_batch(p),
    )


def image_quality_weight(pixel_confidences: np.ndarray, tau_prime: float) -> float:
    """Fraction of pixels whose confidence strictly exceeds tau_prime."""
    conf = np.asarray(pixel_confidences, dtype=np.float64)
    if conf.size == 0:
        raise ValueError("image_quality_weight of an empty confidence vector")
    return float((conf > tau_prime).mean())


def threshold_filter(pixel_confidence: float, tau_prime: float) -> int:
    """1 when confidence strictly exceeds tau_prime, else 0."""
    return int(pixel_confidence > tau_prime)
