"""Constructed hidden-state dumps with known drift behaviour."""

from __future__ import annotations

import numpy as np

from .dump import HiddenStateDump
from .numerics import RngStream


def drift_dump(seed: int, n_layers: int = 8, n_vectors: int = 4000, dim: int = 32,
               noise: float = 1.0) -> HiddenStateDump:
    """Layer ``l`` (1-based) holds ``l * u + e`` with one unit ``u`` shared by all layers.

    ``e`` is Gaussian with expected norm about ``noise``, so both the mean
    cosine and the drift norm grow with depth.
    """
    rng = RngStream(seed)
    u = rng.substream(0).normal(dim)
    u /= np.linalg.norm(u)
    layers = []
    for ell in range(1, n_layers + 1):
        e = rng.substream(ell).normal((n_vectors, dim)) * (noise / np.sqrt(dim))
        layers.append((ell * u + e).astype(np.float32).astype(np.float64))
    return HiddenStateDump(layers)


def isotropic_dump(seed: int, n_layers: int = 8, n_vectors: int = 4000,
                   dim: int = 32) -> HiddenStateDump:
    """Independent standard Gaussian vectors in every layer."""
    rng = RngStream(seed)
    return HiddenStateDump([
        rng.substream(ell).normal((n_vectors, dim)).astype(np.float32).astype(np.float64)
        for ell in range(n_layers)
    ])
