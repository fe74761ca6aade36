"""Anisotropy, drift and attention-shape measurements."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRepresentationError, PreconditionError
from .numerics import DEFAULT_BINS, RngStream, histogram, mean_vector
from .transformer_block import AttentionTrace

DEFAULT_PAIRS = 10_000


@dataclass(frozen=True)
class AnisotropyEstimate:
    mean_cosine: float
    stderr: float
    n_pairs: int
    sampling_seed: int


@dataclass(frozen=True)
class SoftmaxStats:
    avg_max: float
    avg_median: float
    avg_min: float
    seq_max: float
    seq_min: float


@dataclass(frozen=True)
class QKStats:
    mean_q_norm: float
    mean_k_norm: float
    q_cosine: AnisotropyEstimate
    k_cosine: AnisotropyEstimate


@dataclass(frozen=True)
class ScoreSpread:
    mean: float
    std: float
    edges: np.ndarray
    counts: np.ndarray


def _as_rows(vectors) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim < 2:
        raise PreconditionError("expected an array of vectors with shape (..., d)")
    return vectors.reshape(-1, vectors.shape[-1])


def sample_pairs(n: int, n_pairs: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """``n_pairs`` i.i.d. uniform draws of two distinct indices below ``n``."""
    i = rng.integers(0, n, n_pairs)
    j = rng.integers(0, n - 1, n_pairs)
    j += j >= i
    return i, j


def avg_pairwise_cosine(vectors, n_pairs: int = DEFAULT_PAIRS,
                        rng: RngStream | None = None) -> AnisotropyEstimate:
    """Monte-Carlo mean cosine over uniformly drawn pairs of distinct vectors.

    ``vectors`` of shape ``(..., d)`` are pooled over all leading axes in
    C order. Self-pairs are never drawn; draws are with replacement.
    """
    rows = _as_rows(vectors)
    n = rows.shape[0]
    if n < 2:
        raise PreconditionError(f"need at least 2 vectors, got {n}")
    if n_pairs < 1:
        raise PreconditionError("n_pairs must be >= 1")
    rng = rng if rng is not None else RngStream(0)
    i, j = sample_pairs(n, n_pairs, rng)
    norms = np.linalg.norm(rows, axis=1)
    zero = np.flatnonzero(norms[np.concatenate([i, j])] == 0.0)
    if zero.size:
        idx = int(np.concatenate([i, j])[zero[0]])
        raise DegenerateRepresentationError(f"zero vector at index {idx}", index=idx)
    dots = np.einsum("ij,ij->i", rows[i], rows[j])
    cos = np.clip(dots / (norms[i] * norms[j]), -1.0, 1.0)
    stderr = float(cos.std(ddof=1) / np.sqrt(n_pairs)) if n_pairs > 1 else 0.0
    return AnisotropyEstimate(float(cos.mean()), stderr, n_pairs, rng.seed)


def exact_pairwise_cosine(vectors) -> float:
    """Mean cosine over all unordered pairs of distinct vectors, in O(n d).

    Uses ``sum_{a != b} <u_a, u_b> = ||sum u||^2 - n`` for unit vectors.
    """
    rows = _as_rows(vectors)
    n = rows.shape[0]
    norms = np.linalg.norm(rows, axis=1)
    if (norms == 0).any():
        idx = int(np.flatnonzero(norms == 0)[0])
        raise DegenerateRepresentationError(f"zero vector at index {idx}", index=idx)
    total = (rows / norms[:, None]).sum(axis=0)
    return float((total @ total - n) / (n * (n - 1)))


def drift_norm(vectors) -> float:
    """Norm of the mean vector."""
    return float(np.linalg.norm(mean_vector(vectors)))


def mean_row_norm(vectors) -> float:
    return float(np.linalg.norm(_as_rows(vectors), axis=1).mean())


def softmax_stats(trace: AttentionTrace, median: str = "row") -> SoftmaxStats:
    """Max/median/min of attention rows, averaged over rows, heads and sequences.

    ``median="global"`` replaces the per-row median by the median of all
    entries of each (sequence, head) map. ``seq_max``/``seq_min`` are the
    extrema of each (sequence, head) map, averaged over the batch.
    """
    probs = trace.probs
    row_max = probs.max(axis=-1)
    row_min = probs.min(axis=-1)
    if median == "row":
        med = np.median(probs, axis=-1)
    elif median == "global":
        s, h = probs.shape[:2]
        med = np.median(probs.reshape(s, h, -1), axis=-1)
    else:
        raise PreconditionError(f"median must be 'row' or 'global', got {median!r}")
    return SoftmaxStats(
        avg_max=float(row_max.mean()),
        avg_median=float(med.mean()),
        avg_min=float(row_min.mean()),
        seq_max=float(row_max.max(axis=-1).mean()),
        seq_min=float(row_min.min(axis=-1).mean()),
    )


def presoftmax_spread(trace: AttentionTrace, bins: int = DEFAULT_BINS,
                      range: tuple[float, float] | None = None) -> ScoreSpread:
    """Population mean/std and histogram of every pre-softmax score."""
    logits = trace.logits
    mean = float(logits.mean())
    std = float(logits.std())
    edges, counts = histogram(logits, bins=bins, range=range)
    return ScoreSpread(mean, std, edges, counts)


def _per_head_anisotropy(x: np.ndarray, n_pairs: int, rng: RngStream) -> AnisotropyEstimate:
    # x: (S, H, L, d_head). Pairs are drawn inside one head's subspace, then
    # the per-head means are averaged with equal weight.
    means, variances = [], []
    for h in range(x.shape[1]):
        est = avg_pairwise_cosine(x[:, h], n_pairs, rng.substream(h))
        means.append(est.mean_cosine)
        variances.append(est.stderr ** 2)
    n_heads = len(means)
    return AnisotropyEstimate(
        mean_cosine=float(np.mean(means)),
        stderr=float(np.sqrt(np.sum(variances)) / n_heads),
        n_pairs=n_pairs * n_heads,
        sampling_seed=rng.seed,
    )


def qk_stats(trace: AttentionTrace, n_pairs: int = DEFAULT_PAIRS,
             rng: RngStream | None = None) -> QKStats:
    """Query/key row norms and per-head anisotropy.

    A zero query or key row raises ``DegenerateRepresentationError`` whose
    ``partial`` attribute still carries the two mean norms.
    """
    rng = rng if rng is not None else RngStream(0)
    q_norm = mean_row_norm(trace.q)
    k_norm = mean_row_norm(trace.k)
    try:
        q_cos = _per_head_anisotropy(trace.q, n_pairs, rng.substream(0))
        k_cos = _per_head_anisotropy(trace.k, n_pairs, rng.substream(1))
    except DegenerateRepresentationError as exc:
        raise DegenerateRepresentationError(
            f"degenerate query/key rows: {exc}", index=exc.index,
            partial={"mean_q_norm": q_norm, "mean_k_norm": k_norm},
        ) from exc
    return QKStats(q_norm, k_norm, q_cos, k_cos)
