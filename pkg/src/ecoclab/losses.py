"""Training objectives over bit logits, with analytic gradients.

Three code-space losses (binary cross-entropy per bit, cosine distance to the
standardized target codeword, and a codeword-contrastive term with
temperature) plus the softmax cross-entropy baseline. Every loss returns its
scalar together with the gradient with respect to the logits, and a central
finite-difference harness checks the analytic gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .codebook import Codebook
from .decoding import sigmoid

# Probability clamp for BCE log arguments only; keeps the loss finite at
# hard labels without perturbing gradients.
EPS_CLIP = 1e-7

# Below this norm, logits have no direction: cosine terms take their
# continuity values and gradients are zeroed (removable singularity).
_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class LossValue:
    scalar: float
    gradient: np.ndarray  # d scalar / d logits


@dataclass(frozen=True)
class LossConfig:
    """Weights of the combined objective: bce + lambda1*pcd + lambda2*pcc."""

    lambda1: float = 5.0
    lambda2: float = 2.0
    tau: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")


def _target_bits(target) -> np.ndarray:
    bits = getattr(target, "bits", target)
    return np.asarray(bits, dtype=np.float64)


def bce_loss(logits: np.ndarray, target) -> LossValue:
    """Mean binary cross-entropy over bits; gradient is (p - c) / K."""
    x = np.asarray(logits, dtype=np.float64)
    c = _target_bits(target)
    if x.shape != c.shape:
        raise ValueError(f"length mismatch: logits {x.shape} vs target {c.shape}")
    p = sigmoid(x)
    pc = np.clip(p, EPS_CLIP, 1.0 - EPS_CLIP)
    scalar = -float(np.mean(c * np.log(pc) + (1.0 - c) * np.log(1.0 - pc)))
    return LossValue(scalar=scalar, gradient=(p - c) / x.size)


def pcd_loss(logits: np.ndarray, target) -> LossValue:
    """One minus the cosine similarity between logits and the standardized codeword."""
    x = np.asarray(logits, dtype=np.float64)
    c = _target_bits(target)
    if x.shape != c.shape:
        raise ValueError(f"length mismatch: logits {x.shape} vs target {c.shape}")
    chat = 2.0 * c - 1.0
    xn = np.linalg.norm(x)
    if xn < _NORM_FLOOR:
        return LossValue(scalar=1.0, gradient=np.zeros_like(x))
    cn = math.sqrt(x.size)
    cos = float(x @ chat) / (xn * cn)
    grad = -(chat / (xn * cn) - cos * x / xn**2)
    return LossValue(scalar=1.0 - cos, gradient=grad)


def _standardized_negatives(cb: Codebook, bits: np.ndarray) -> np.ndarray:
    """Standardized codebook rows, excluding any row bit-identical to the target.

    A bit-wise target that is not a codebook row keeps all N rows as
    negatives; exclusion is by exact bit equality, not class identity.
    """
    same = (cb.matrix == bits.astype(np.uint8)).all(axis=1)
    return cb.standardized()[~same]


def pcc_loss(logits: np.ndarray, target, cb: Codebook, tau: float) -> LossValue:
    """Contrast the target codeword against the other codebook rows.

    softmax-style: -log exp(s+/tau) / (exp(s+/tau) + sum_j exp(s_j/tau))
    with s the cosine similarities of the logits to the standardized
    codewords. Equals log(1 + sum_j exp((s_j - s+)/tau)).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    x = np.asarray(logits, dtype=np.float64)
    c = _target_bits(target)
    if x.shape != c.shape:
        raise ValueError(f"length mismatch: logits {x.shape} vs target {c.shape}")
    chat = 2.0 * c - 1.0
    negs = _standardized_negatives(cb, c)
    if negs.shape[0] == 0:
        return LossValue(scalar=0.0, gradient=np.zeros_like(x))
    xn = np.linalg.norm(x)
    if xn < _NORM_FLOOR:
        return LossValue(scalar=math.log1p(negs.shape[0]), gradient=np.zeros_like(x))
    cn = math.sqrt(x.size)
    s_pos = float(x @ chat) / (xn * cn)
    s_neg = (negs @ x) / (xn * cn)
    u = (s_neg - s_pos) / tau
    m = max(float(u.max()), 0.0)
    z = math.exp(-m) + float(np.exp(u - m).sum())
    scalar = m + math.log(z)
    w = np.exp(u - m) / z  # softmax weight of each negative
    # d cos(x, v) / dx = v/(|x||v|) - cos * x/|x|^2, applied per pairing
    sum_w = float(w.sum())
    vec_term = (w @ negs - sum_w * chat) / (xn * cn)
    cos_term = (float(w @ s_neg) - sum_w * s_pos) * x / xn**2
    return LossValue(scalar=scalar, gradient=(vec_term - cos_term) / tau)


def pcc_loss_rewritten(logits: np.ndarray, target, cb: Codebook, tau: float) -> float:
    """Scalar of the contrastive loss via the paired-difference form.

    log(1 + sum_j exp(x . (chat_j - chat) / (|x| sqrt(K) tau))). All
    standardized codewords share norm sqrt(K), so this equals the softmax
    form above; kept as an independent route for identity checks.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    x = np.asarray(logits, dtype=np.float64)
    c = _target_bits(target)
    chat = 2.0 * c - 1.0
    negs = _standardized_negatives(cb, c)
    if negs.shape[0] == 0:
        return 0.0
    xn = np.linalg.norm(x)
    if xn < _NORM_FLOOR:
        return math.log1p(negs.shape[0])
    u = ((negs - chat) @ x) / (xn * math.sqrt(x.size) * tau)
    m = max(float(u.max()), 0.0)
    return m + math.log(math.exp(-m) + float(np.exp(u - m).sum()))


def total_loss(logits: np.ndarray, target, cb: Codebook, cfg: LossConfig) -> LossValue:
    """bce + lambda1 * pcd + lambda2 * pcc, scalar and gradient alike."""
    b = bce_loss(logits, target)
    d = pcd_loss(logits, target)
    k = pcc_loss(logits, target, cb, cfg.tau)
    return LossValue(
        scalar=b.scalar + cfg.lambda1 * d.scalar + cfg.lambda2 * k.scalar,
        gradient=b.gradient + cfg.lambda1 * d.gradient + cfg.lambda2 * k.gradient,
    )


def ce_loss(scores: np.ndarray, target_class: int) -> LossValue:
    """Softmax cross-entropy over class scores; gradient is softmax - onehot."""
    s = np.asarray(scores, dtype=np.float64)
    if not 0 <= target_class < s.size:
        raise ValueError(f"target class {target_class} out of range for {s.size} scores")
    shifted = s - s.max()
    log_z = math.log(float(np.exp(shifted).sum()))
    softmax = np.exp(shifted - log_z)
    grad = softmax.copy()
    grad[target_class] -= 1.0
    return LossValue(scalar=float(log_z - shifted[target_class]), gradient=grad)


def finite_diff_check(
    loss_fn: Callable[[np.ndarray], LossValue],
    logits: np.ndarray,
    step: float = 1e-5,
) -> float:
    """Max relative gap between the analytic gradient and central differences.

    Per coordinate: |analytic - numeric| / (|analytic| + 1e-8).
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError(f"step {step} outside [1e-6, 1e-3]")
    x = np.asarray(logits, dtype=np.float64)
    analytic = loss_fn(x).gradient
    worst = 0.0
    for i in range(x.size):
        hi, lo = x.copy(), x.copy()
        hi[i] += step
        lo[i] -= step
        numeric = (loss_fn(hi).scalar - loss_fn(lo).scalar) / (2.0 * step)
        worst = max(worst, abs(analytic[i] - numeric) / (abs(analytic[i]) + 1e-8))
    return worst


# ---------------------------------------------------------------------------
# Batch forms used by the training loop. Each returns per-pixel scalars and
# per-pixel gradients; callers apply their own pixel weighting and reduction.


def bce_loss_batch(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(logits, dtype=np.float64)
    c = np.asarray(targets, dtype=np.float64)
    p = sigmoid(x)
    pc = np.clip(p, EPS_CLIP, 1.0 - EPS_CLIP)
    scalars = -(c * np.log(pc) + (1.0 - c) * np.log(1.0 - pc)).mean(axis=1)
    return scalars, (p - c) / x.shape[1]


def pcd_loss_batch(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(logits, dtype=np.float64)
    chat = 2.0 * np.asarray(targets, dtype=np.float64) - 1.0
    xn = np.linalg.norm(x, axis=1, keepdims=True)
    small = xn[:, 0] < _NORM_FLOOR
    xn_safe = np.where(xn < _NORM_FLOOR, 1.0, xn)
    cn = math.sqrt(x.shape[1])
    cos = (x * chat).sum(axis=1, keepdims=True) / (xn_safe * cn)
    grads = -(chat / (xn_safe * cn) - cos * x / xn_safe**2)
    scalars = 1.0 - cos[:, 0]
    scalars[small] = 1.0
    grads[small] = 0.0
    return scalars, grads


def pcc_loss_batch(
    logits: np.ndarray, targets: np.ndarray, cb: Codebook, tau: float
) -> tuple[np.ndarray, np.ndarray]:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    x = np.asarray(logits, dtype=np.float64)
    c = np.asarray(targets, dtype=np.float64)
    chat = 2.0 * c - 1.0
    all_std = cb.standardized()  # (N, K)
    excluded = (c[:, None, :] == cb.matrix[None, :, :]).all(axis=2)  # (P, N)
    xn = np.linalg.norm(x, axis=1, keepdims=True)
    small = xn[:, 0] < _NORM_FLOOR
    xn_safe = np.where(xn < _NORM_FLOOR, 1.0, xn)
    cn = math.sqrt(x.shape[1])
    s_pos = (x * chat).sum(axis=1, keepdims=True) / (xn_safe * cn)  # (P, 1)
    s_all = x @ all_std.T / (xn_safe * cn)  # (P, N)
    u = (s_all - s_pos) / tau
    u = np.where(excluded, -np.inf, u)
    m = np.maximum(u.max(axis=1, keepdims=True), 0.0)
    e = np.exp(u - m)
    z = np.exp(-m) + e.sum(axis=1, keepdims=True)
    scalars = (m + np.log(z))[:, 0]
    w = e / z  # (P, N), zero at excluded rows
    sum_w = w.sum(axis=1, keepdims=True)
    vec_term = (w @ all_std - sum_w * chat) / (xn_safe * cn)
    cos_term = ((w * s_all).sum(axis=1, keepdims=True) - sum_w * s_pos) * x / xn_safe**2
    grads = (vec_term - cos_term) / tau
    n_negs = (~excluded).sum(axis=1)
    scalars[small] = np.log1p(n_negs[small])
    grads[small] = 0.0
    return scalars, grads


def total_loss_batch(
    logits: np.ndarray, targets: np.ndarray, cb: Codebook, cfg: LossConfig
) -> tuple[np.ndarray, np.ndarray]:
    sb, gb = bce_loss_batch(logits, targets)
    sd, gd = pcd_loss_batch(logits, targets)
    sk, gk = pcc_loss_batch(logits, targets, cb, cfg.tau)
    return sb + cfg.lambda1 * sd + cfg.lambda2 * sk, gb + cfg.lambda1 * gd + cfg.lambda2 * gk


def ce_loss_batch(scores: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(targets, dtype=np.int64)
    shifted = s - s.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    idx = np.arange(s.shape[0])
    scalars = log_z - shifted[idx, t]
    grads = np.exp(shifted - log_z[:, None])
    grads[idx, t] -= 1.0
    return scalars, grads
