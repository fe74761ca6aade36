"""Deterministic float64 kernels and seeded random streams.

Everything here is a pure function of its inputs, except ``RngStream``,
which is a single-owner stateful object. Parallel work must derive its own
sub-stream with :meth:`RngStream.substream` instead of sharing one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf as _erf

from .errors import DegenerateRepresentationError, PreconditionError, ShapeError

RNG_ALGORITHM = "PCG64/SeedSequence(seed, spawn_key=path); normals by Box-Muller"

DEFAULT_BINS = 100


@dataclass
class RngStream:
    """Seeded PCG64 stream addressed by ``(seed, path)``.

    Sub-stream ``path`` tuples feed numpy's ``SeedSequence.spawn_key``, so
    ``RngStream(s, (i,))`` and ``RngStream(s, (j,))`` are independent for
    ``i != j`` and do not depend on how many draws any other stream made.
    """

    seed: int
    path: tuple[int, ...] = ()
    _gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise PreconditionError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        self.seed = int(self.seed)
        self.path = tuple(int(p) for p in self.path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def substream(self, index: int) -> "RngStream":
        return RngStream(self.seed, self.path + (int(index),))

    def uniform(self, size) -> np.ndarray:
        """Doubles in [0, 1) with 53 random bits."""
        return self._gen.random(size)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        return self._gen.integers(low, high, size=size, dtype=np.int64)

    def normal(self, size) -> np.ndarray:
        """Standard normals via the Box-Muller transform.

        Pairs ``(u1, u2)`` are drawn as consecutive uniforms; ``u1`` is mapped
        to ``(0, 1]`` so the log is finite. Output slot ``2k`` takes the cosine
        branch and ``2k + 1`` the sine branch of pair ``k``.
        """
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        n_pairs = (n + 1) // 2
        u = self._gen.random(2 * n_pairs).reshape(n_pairs, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        out = np.empty((n_pairs, 2))
        np.multiply(radius, np.cos(angle), out=out[:, 0])
        np.multiply(radius, np.sin(angle), out=out[:, 1])
        return out.reshape(-1)[:n].reshape(shape)

    def truncated_normal(self, size, std: float, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std^2) with draws beyond ``bound`` std devs resampled.

        Rejected slots are refilled in flat index order from fresh draws, so
        the result is a deterministic function of the stream state.
        """
        shape = (size,) if np.isscalar(size) else tuple(size)
        z = self.normal(shape).reshape(-1)
        bad = np.flatnonzero(np.abs(z) > bound)
        while bad.size:
            z[bad] = self.normal(bad.size)
            bad = bad[np.abs(z[bad]) > bound]
        return (z * std).reshape(shape)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D float64 product. Raises ``ShapeError`` naming both shapes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    if not np.isfinite(out).all():
        raise FloatingPointError("non-finite entries in matmul result")
    return out


def softmax_rows(m: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax over the last axis with max subtraction.

    ``out`` may alias ``m`` for an in-place update.
    """
    m = np.asarray(m, dtype=np.float64)
    if np.isnan(m).any():
        raise PreconditionError("softmax input contains NaN")
    if out is None:
        out = np.empty_like(m)
    np.subtract(m, m.max(axis=-1, keepdims=True), out=out)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def layer_norm(v, gamma, beta, eps: float) -> np.ndarray:
    """Normalize over the last axis with the population (1/d) variance.

    ``eps=0`` is accepted for exact arithmetic checks on non-constant input.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] == 0:
        raise PreconditionError("layer_norm of a zero-length vector")
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape[-1:] != v.shape[-1:] or beta.shape[-1:] != v.shape[-1:]:
        raise ShapeError(f"gamma {gamma.shape} / beta {beta.shape} do not match input {v.shape}")
    if eps < 0:
        raise PreconditionError("eps must be non-negative")
    centered = v - v.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", centered, centered)[..., None]
    var /= v.shape[-1]
    var += eps
    centered /= np.sqrt(var)
    if not (gamma == 1.0).all():
        centered *= gamma
    if (beta != 0.0).any():
        centered += beta
    return centered


def gaussian_vector(rng: RngStream, dim: int) -> np.ndarray:
    if dim < 1:
        raise PreconditionError(f"dim must be >= 1, got {dim}")
    return rng.normal(dim)


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateRepresentationError("cosine of a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


# Abramowitz & Stegun 7.1.26, |error| <= 1.5e-7 on the real line.
_AS_P = 0.3275911
_AS_A = (0.254829592, -0.284496736, 1.421413741, -1.453152027, 1.061405429)


def erf_approx(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    t = 1.0 / (1.0 + _AS_P * ax)
    poly = 0.0
    for a in reversed(_AS_A):
        poly = (poly + a) * t
    y = 1.0 - poly * np.exp(-ax * ax)
    # coefficients sum to 1 - 1e-9; pin the origin exactly
    y = np.where(ax == 0.0, 0.0, np.copysign(y, x))
    return float(y) if y.ndim == 0 else y


def gelu(v) -> np.ndarray:
    """Exact-erf GELU, ``x/2 * (1 + erf(x/sqrt 2))``."""
    v = np.asarray(v, dtype=np.float64)
    out = v * (1.0 / math.sqrt(2.0))
    _erf(out, out=out)
    out += 1.0
    out *= v
    out *= 0.5
    return out


def l2_norm(v) -> float:
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64)))


def mean_vector(vectors) -> np.ndarray:
    """Mean over all leading axes of a ``(..., d)`` array."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim == 0 or vectors.size == 0:
        raise PreconditionError("mean_vector of an empty set")
    return vectors.reshape(-1, vectors.shape[-1]).mean(axis=0)


def histogram(values, bins: int = DEFAULT_BINS, range: tuple[float, float] | None = None):
    """Equal-width histogram; returns ``(edges, counts)``.

    ``range=None`` uses ``[min, max]`` of the finite inputs. The last bin is
    closed on the right, all others half-open, so counts sum to the number of
    finite values inside ``range``.
    """
    if bins < 1:
        raise PreconditionError(f"bins must be >= 1, got {bins}")
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise PreconditionError("histogram of an empty set")
    if range is None:
        range = (float(values.min()), float(values.max()))
    counts, edges = np.histogram(values, bins=bins, range=range)
    return edges, counts
