"""Soft-Hamming decoding of per-bit probabilities to class decisions.

Each pixel carries a vector of K bit probabilities; its class is the
codebook row at minimum soft Hamming distance (mean absolute difference).
Ties break toward the lower class index. Also provides the bit/pixel
confidence measures used by label mining and calibration, and the batch
probability file formats (CSV and a small binary blob).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codebook import Codebook


@dataclass(frozen=True)
class DecodeResult:
    class_index: int
    distances: np.ndarray  # (N,) soft Hamming distance to each codeword
    ranked: np.ndarray  # (N,) class indices sorted by ascending distance


def sigmoid(logits: np.ndarray) -> np.ndarray:
    """Elementwise logistic function; stable for large |logit|."""
    x = np.asarray(logits, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_lengths(codeword: np.ndarray, probs: np.ndarray) -> None:
    if codeword.shape != probs.shape:
        raise ValueError(f"length mismatch: codeword {codeword.shape} vs probs {probs.shape}")


def soft_hamming(codeword: np.ndarray, probs: np.ndarray) -> float:
    """Mean absolute difference between a probability vector and a codeword."""
    c = np.asarray(codeword, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    _check_lengths(c, p)
    return float(np.mean(np.abs(p - c)))


def soft_hamming_matrix(cb: Codebook, probs: np.ndarray) -> np.ndarray:
    """Soft Hamming distances of a (P, K) probability batch to every codeword.

    Returns (P, N). Row reductions match scalar soft_hamming bit for bit, so
    rankings computed here and per pixel agree even through exact ties.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if p.shape[1] != cb.code_length:
        raise ValueError(
            f"length mismatch: probs have {p.shape[1]} bits, codebook has {cb.code_length}"
        )
    return np.abs(p[:, None, :] - cb.matrix[None, :, :].astype(np.float64)).mean(axis=2)


def decode(cb: Codebook, probs: np.ndarray) -> DecodeResult:
    """Nearest-codeword decision with the full distance ranking."""
    distances = soft_hamming_matrix(cb, probs)[0]
    ranked = np.argsort(distances, kind="stable")
    return DecodeResult(class_index=int(ranked[0]), distances=distances, ranked=ranked)


def decode_batch(cb: Codebook, probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Classes and distances for a (P, K) batch; ties to the lower index."""
    distances = soft_hamming_matrix(cb, probs)
    return distances.argmin(axis=1), distances


def ranked_batch(distances: np.ndarray) -> np.ndarray:
    """Per-row class ranking by ascending distance, ties to the lower index."""
    return np.argsort(distances, axis=1, kind="stable")


def bit_confidence(probs: np.ndarray) -> np.ndarray:
    """Per-bit confidence max(p, 1-p), in [0.5, 1]."""
    p = np.asarray(probs, dtype=np.float64)
    return np.maximum(p, 1.0 - p)


def pixel_confidence(probs: np.ndarray) -> float:
    """Mean bit confidence of one pixel."""
    return float(bit_confidence(probs).mean())


def pixel_confidence_batch(probs: np.ndarray) -> np.ndarray:
    """Mean bit confidence per row of a (P, K) batch."""
    return bit_confidence(np.atleast_2d(probs)).mean(axis=1)


_BLOB_HEADER = struct.Struct("<ii")


def write_prob_blob(path: str | Path, probs: np.ndarray) -> None:
    """Write a (P, K) probability matrix as the binary blob format.

    Layout: int32 P, int32 K (little endian), then P*K float32 row-major.
    """
    arr = np.ascontiguousarray(np.atleast_2d(probs), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_BLOB_HEADER.pack(arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_prob_blob(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _BLOB_HEADER.size:
        raise ValueError(f"{path}: truncated blob header")
    n_pixels, n_bits = _BLOB_HEADER.unpack_from(raw)
    if n_pixels < 0 or n_bits <= 0:
        raise ValueError(f"{path}: bad blob dimensions {n_pixels}x{n_bits}")
    expected = _BLOB_HEADER.size + 4 * n_pixels * n_bits
    if len(raw) != expected:
        raise ValueError(f"{path}: blob size {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_BLOB_HEADER.size)
    return data.reshape(n_pixels, n_bits).astype(np.float64)


def read_prob_csv(path: str | Path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64, comments="#"))


def read_probs(path: str | Path) -> np.ndarray:
    """Load probabilities from .blob files or CSV, by extension."""
    if str(path).endswith(".blob"):
        return read_prob_blob(path)
    return read_prob_csv(path)
