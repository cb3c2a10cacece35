"""Binary codebooks for output-code classification.

A codebook assigns each of N classes a K-bit codeword. This module builds
codebooks (random max-min-distance search, embedding quantization, one-hot),
measures their row/column separation, validates their structural invariants,
and serializes them to JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

# Identifier of the bit-generation scheme stored in codebook provenance.
# Candidate j of a search draws its bits from an independent substream,
# so results do not depend on chunking or thread count.
PRNG_ID = "numpy-pcg64-seedseq[seed,index]"

STRATEGIES = ("mmd", "text", "onehot", "custom")


class CodebookError(ValueError):
    """A codebook could not be constructed, parsed, or round-tripped."""


@dataclass(frozen=True)
class Codebook:
    """N x K binary code matrix plus provenance.

    ``matrix`` is the single source of truth; row n is the codeword of
    class n and bit k of that codeword is ``matrix[n, k]``.
    """

    matrix: np.ndarray
    strategy: str = "custom"
    class_names: tuple[str, ...] | None = None
    seed: int | None = None
    iterations: int | None = None
    prng: str | None = None

    def __post_init__(self):
        m = np.asarray(self.matrix)
        if m.ndim != 2:
            raise CodebookError(f"code matrix must be 2-D, got shape {m.shape}")
        if m.shape[0] < 2 or m.shape[1] < 1:
            raise CodebookError(f"need at least 2 classes and 1 bit, got shape {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise CodebookError("code matrix entries must be 0 or 1")
        if self.strategy not in STRATEGIES:
            raise CodebookError(f"unknown strategy {self.strategy!r}")
        if self.class_names is not None and len(self.class_names) != m.shape[0]:
            raise CodebookError("class_names length does not match n_classes")
        m = np.ascontiguousarray(m, dtype=np.uint8)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def code_length(self) -> int:
        return self.matrix.shape[1]

    def rows(self) -> list[str]:
        """Codewords as '0'/'1' strings, one per class."""
        return ["".join(str(b) for b in row) for row in self.matrix]

    @classmethod
    def from_rows(cls, rows: Sequence[str], **kwargs) -> "Codebook":
        if not rows:
            raise CodebookError("empty row list")
        lengths = {len(r) for r in rows}
        if len(lengths) != 1:
            raise CodebookError(f"rows have inconsistent lengths {sorted(lengths)}")
        bad = set("".join(rows)) - {"0", "1"}
        if bad:
            raise CodebookError(f"rows contain non-binary characters {sorted(bad)}")
        matrix = np.array([[int(c) for c in r] for r in rows], dtype=np.uint8)
        return cls(matrix=matrix, **kwargs)

    def standardized(self) -> np.ndarray:
        """Codewords mapped from {0,1} to {-1,+1}, as float64."""
        return 2.0 * self.matrix - 1.0


@dataclass(frozen=True)
class SeparationStats:
    """Hamming separation of a codebook's rows and columns.

    Column stats are vacuous for K < 2 and reported as d_min_col = N,
    d_max_col = 0 (the identity elements of min/max over no pairs).
    """

    d_min_row: int
    d_min_col: int
    d_max_col: int
    d_mean_row: float
    correctable_bits: int


@dataclass(frozen=True)
class EmbeddingTable:
    """Per-class real vectors, all of one dimension, used for quantized codes."""

    names: tuple[str, ...]
    vectors: np.ndarray  # (N, C) float64

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float64))
        if v.ndim != 2 or v.shape[0] != len(self.names):
            raise CodebookError("embedding table shape does not match names")
        if v.shape[1] < 1:
            raise CodebookError("embedding dimension must be >= 1")
        norms = np.linalg.norm(v, axis=1)
        if (norms == 0).any():
            zero = [self.names[i] for i in np.flatnonzero(norms == 0)]
            raise CodebookError(f"zero-norm embedding vectors for {zero}")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]


def _row_distances(matrix: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between rows, as the condensed upper triangle."""
    m = matrix.astype(np.int32)
    d = (m[:, None, :] != m[None, :, :]).sum(axis=2)
    iu = np.triu_indices(matrix.shape[0], 1)
    return d[iu]


def separation_stats(cb: Codebook) -> SeparationStats:
    """Exact row/column Hamming statistics over all pairs."""
    rd = _row_distances(cb.matrix)
    d_min_row = int(rd.min())
    d_mean_row = float(rd.mean())
    if cb.code_length >= 2:
        cd = _row_distances(cb.matrix.T)
        d_min_col, d_max_col = int(cd.min()), int(cd.max())
    else:
        d_min_col, d_max_col = cb.n_classes, 0
    return SeparationStats(
        d_min_row=d_min_row,
        d_min_col=d_min_col,
        d_max_col=d_max_col,
        d_mean_row=d_mean_row,
        correctable_bits=(d_min_row - 1) // 2,
    )


def validate(cb: Codebook) -> list[str]:
    """Report every violated codebook invariant; an empty list means valid.

    Never raises: problems are returned as human-readable strings, each
    beginning with a stable tag (``duplicate rows``, ``identical columns``,
    ``complementary columns``, ``constant column``, ``one-hot pattern``).
    """
    report: list[str] = []
    m = cb.matrix
    n, k = m.shape
    for i in range(n):
        for j in range(i + 1, n):
            if (m[i] == m[j]).all():
                report.append(f"duplicate rows: classes {i} and {j}")
    for a in range(k):
        if m[:, a].min() == m[:, a].max():
            report.append(f"constant column: bit {a}")
    for a in range(k):
        for b in range(a + 1, k):
            if (m[:, a] == m[:, b]).all():
                report.append(f"identical columns: bits {a} and {b}")
            elif (m[:, a] != m[:, b]).all():
                report.append(f"complementary columns: bits {a} and {b}")
    if cb.strategy == "onehot":
        if n != k:
            report.append(f"one-hot pattern: code_length {k} != n_classes {n}")
        elif not (m == np.eye(n, dtype=np.uint8)).all():
            report.append("one-hot pattern: rows are not the identity pattern")
    return report


def _candidate_stats(batch: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(d_min_row, d_min_col, d_max_col, has_constant_column) for a (B,N,K) batch.

    Exact: 0/1 values in float32 keep integer sums below 2**24.
    """
    f = batch.astype(np.float32)
    g = 1.0 - f
    _, n, k = batch.shape
    dr = np.einsum("bik,bjk->bij", f, g) + np.einsum("bik,bjk->bij", g, f)
    iu = np.triu_indices(n, 1)
    d_min_r = dr[:, iu[0], iu[1]].min(axis=1).astype(np.int64)
    if k >= 2:
        ft, gt = np.swapaxes(f, 1, 2), np.swapaxes(g, 1, 2)
        dc = np.einsum("bik,bjk->bij", ft, gt) + np.einsum("bik,bjk->bij", gt, ft)
        ju = np.triu_indices(k, 1)
        dc_pairs = dc[:, ju[0], ju[1]]
        d_min_c = dc_pairs.min(axis=1).astype(np.int64)
        d_max_c = dc_pairs.max(axis=1).astype(np.int64)
    else:  # no column pairs: nothing can collide
        d_min_c = np.full(batch.shape[0], n, dtype=np.int64)
        d_max_c = np.zeros(batch.shape[0], dtype=np.int64)
    colsum = batch.sum(axis=1)
    constant = ((colsum == 0) | (colsum == n)).any(axis=1)
    return d_min_r, d_min_c, d_max_c, constant


def candidate_matrix(seed: int, index: int, n_classes: int, code_length: int) -> np.ndarray:
    """Bits of search candidate ``index``: fair coin flips from its own substream."""
    rng = np.random.default_rng([seed, index])
    return rng.integers(0, 2, size=(n_classes, code_length), dtype=np.uint8)


def generate_mmd(
    n_classes: int,
    code_length: int,
    iterations: int,
    seed: int | None = None,
    class_names: Sequence[str] | None = None,
    chunk: int = 2048,
) -> Codebook:
    """Random search for a well-separated codebook.

    Draws ``iterations`` random binary matrices, drops candidates with
    duplicate rows, identical/complementary columns, or a constant column,
    and keeps the first candidate maximizing
    d_min_row + d_min_col + (N - d_max_col).

    Deterministic given ``seed``; a fresh seed is drawn and recorded when
    none is supplied. Raises CodebookError if every candidate is invalid.
    """
    if n_classes < 2:
        raise CodebookError("need at least 2 classes")
    if code_length < math.ceil(math.log2(n_classes)):
        raise CodebookError(
            f"code_length {code_length} cannot address {n_classes} classes "
            f"(need >= {math.ceil(math.log2(n_classes))})"
        )
    # At most one usable column per complement pair of non-constant patterns.
    max_cols = 2 ** (n_classes - 1) - 1 if n_classes <= 40 else code_length
    if code_length > max_cols:
        raise CodebookError(
            f"no valid codebook exists for N={n_classes}, K={code_length}: "
            f"only {max_cols} distinct non-complementary non-constant columns exist"
        )
    if iterations < 1:
        raise CodebookError("iterations must be >= 1")
    if seed is None:
        seed = int(np.random.SeedSequence().generate_state(1, np.uint64)[0])
    seed = int(seed)

    best_obj = -1
    best: np.ndarray | None = None
    for start in range(0, iterations, chunk):
        count = min(chunk, iterations - start)
        batch = np.empty((count, n_classes, code_length), dtype=np.uint8)
        for j in range(count):
            batch[j] = candidate_matrix(seed, start + j, n_classes, code_length)
        d_min_r, d_min_c, d_max_c, constant = _candidate_stats(batch)
        ok = (d_min_r > 0) & (d_min_c > 0) & (d_max_c < n_classes) & ~constant
        objective = np.where(ok, d_min_r + d_min_c + (n_classes - d_max_c), -1)
        j = int(np.argmax(objective))
        if objective[j] > best_obj:
            best_obj = int(objective[j])
            best = batch[j].copy()
    if best is None or best_obj < 0:
        raise CodebookError(
            f"all {iterations} candidates invalid for N={n_classes}, K={code_length}; "
            "increase iterations or code_length"
        )
    return Codebook(
        matrix=best,
        strategy="mmd",
        class_names=tuple(class_names) if class_names else None,
        seed=seed,
        iterations=iterations,
        prng=PRNG_ID,
    )


def generate_text(emb: EmbeddingTable, code_length: int) -> Codebook:
    """Quantize per-class embeddings into a binary codebook.

    Each class vector is L2-normalized; dimensions are visited in order of
    decreasing variance across classes; a dimension becomes a column by
    thresholding at its cross-class mean (value >= mean maps to 1). Columns
    that are constant, or identical/complementary to an accepted column,
    are skipped. Stops after ``code_length`` accepted columns.
    """
    if emb.vectors.shape[0] < 2:
        raise CodebookError("need at least 2 classes")
    if code_length < 1:
        raise CodebookError("code_length must be >= 1")
    scaled = emb.vectors / np.linalg.norm(emb.vectors, axis=1, keepdims=True)
    variance = scaled.var(axis=0)
    order = np.argsort(-variance, kind="stable")

    accepted: list[np.ndarray] = []
    for dim in order:
        col = (scaled[:, dim] >= scaled[:, dim].mean()).astype(np.uint8)
        if col.min() == col.max():
            continue
        clash = any((col == c).all() or (col != c).all() for c in accepted)
        if clash:
            continue
        accepted.append(col)
        if len(accepted) == code_length:
            break
    if len(accepted) < code_length:
        raise CodebookError(
            f"fewer than {code_length} valid columns: only {len(accepted)} of "
            f"{emb.dimension} dimensions quantize to usable bit tasks"
        )
    matrix = np.stack(accepted, axis=1)
    rows = {tuple(r) for r in matrix}
    if len(rows) != matrix.shape[0]:
        raise CodebookError("quantized rows are not pairwise distinct")
    return Codebook(matrix=matrix, strategy="text", class_names=emb.names)


def one_hot(n_classes: int, class_names: Sequence[str] | None = None) -> Codebook:
    """Identity-pattern baseline codebook (K = N, row i is e_i)."""
    if n_classes < 2:
        raise CodebookError("need at least 2 classes")
    return Codebook(
        matrix=np.eye(n_classes, dtype=np.uint8),
        strategy="onehot",
        class_names=tuple(class_names) if class_names else None,
    )


def theorem2_threshold(
    code_length: int,
    n_classes: int,
    eps: float,
    gamma: float,
    gamma_hat: float,
    kappa: float,
) -> float:
    """Minimum-distance bound below which the code gives no noise advantage.

    A codebook helps against label noise of rate ``eps`` when its minimum
    row distance strictly exceeds
    (16 eps kappa^2 / gamma^2) ((1 + ln 2) n / 2 - ln(2C)) + 2 gamma_hat^2 / gamma^2.
    eps = 0 is allowed and leaves only the margin-ratio term.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"eps must be in [0, 1), got {eps}")
    noise_term = (16.0 * eps * kappa**2 / gamma**2) * (
        (1.0 + math.log(2.0)) * code_length / 2.0 - math.log(2.0 * n_classes)
    )
    return noise_term + 2.0 * gamma_hat**2 / gamma**2


def to_dict(cb: Codebook) -> dict:
    stats = separation_stats(cb)
    doc = {
        "n_classes": cb.n_classes,
        "code_length": cb.code_length,
        "rows": cb.rows(),
        "strategy": cb.strategy,
        "seed": cb.seed,
        "iterations": cb.iterations,
        "prng": cb.prng,
        "stats": {
            "d_min_row": stats.d_min_row,
            "d_min_col": stats.d_min_col,
            "d_max_col": stats.d_max_col,
        },
    }
    if cb.class_names is not None:
        doc["class_names"] = list(cb.class_names)
    return doc


def save(cb: Codebook, path: str | Path, meta: dict | None = None) -> None:
    doc = to_dict(cb)
    if meta:
        doc["meta"] = meta
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load(path: str | Path) -> tuple[Codebook, list[str]]:
    """Read a codebook file and re-validate it.

    Returns the codebook together with its validity report (empty when all
    invariants hold). Raises CodebookError on malformed files or dimension
    mismatches between the declared sizes and the stored rows.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CodebookError(f"cannot read codebook file {path}: {exc}") from exc
    for key in ("n_classes", "code_length", "rows"):
        if key not in doc:
            raise CodebookError(f"codebook file missing key {key!r}")
    rows = doc["rows"]
    if len(rows) != doc["n_classes"]:
        raise CodebookError(
            f"dimension mismatch: {len(rows)} rows but n_classes={doc['n_classes']}"
        )
    if any(len(r) != doc["code_length"] for r in rows):
        raise CodebookError(
            f"dimension mismatch: rows must all have length {doc['code_length']}"
        )
    names = doc.get("class_names")
    cb = Codebook.from_rows(
        rows,
        strategy=doc.get("strategy", "custom"),
        class_names=tuple(names) if names else None,
        seed=doc.get("seed"),
        iterations=doc.get("iterations"),
        prng=doc.get("prng"),
    )
    report = validate(cb)
    stored = doc.get("stats")
    if stored:
        actual = separation_stats(cb)
        for key in ("d_min_row", "d_min_col", "d_max_col"):
            if key in stored and stored[key] != getattr(actual, key):
                report.append(
                    f"stats mismatch: stored {key}={stored[key]}, actual {getattr(actual, key)}"
                )
    return cb, report


def read_embeddings(path: str | Path) -> EmbeddingTable:
    """Parse one class per line: a name token followed by real components."""
    names: list[str] = []
    vectors: list[list[float]] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise CodebookError(f"{path}:{lineno}: expected 'name v1 v2 ...'")
        try:
            vectors.append([float(x) for x in parts[1:]])
        except ValueError as exc:
            raise CodebookError(f"{path}:{lineno}: bad component: {exc}") from exc
        names.append(parts[0])
    if not names:
        raise CodebookError(f"{path}: no embedding records")
    widths = {len(v) for v in vectors}
    if len(widths) != 1:
        raise CodebookError(f"{path}: inconsistent vector dimensions {sorted(widths)}")
    return EmbeddingTable(names=tuple(names), vectors=np.array(vectors))
