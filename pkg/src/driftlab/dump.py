"""HSD1 hidden-state dumps and per-layer anisotropy/drift analysis.

On-disk layout, little-endian throughout::

    b"HSD1"             magic, 4 ASCII bytes
    u32 version         = 1
    u32 n_layers
    repeated n_layers times:
        u32 dim
        u64 n_vectors
        f32[n_vectors * dim]   row-major

Values are float32 on disk and float64 in memory. ``write_dump`` rounds to
float32, so only float32-representable values survive a round trip exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateRepresentationError, DumpFormatError, PreconditionError
from .metrics import DEFAULT_PAIRS, AnisotropyEstimate, avg_pairwise_cosine, drift_norm
from .numerics import RngStream
from .stats import DriftCorrelation, drift_correlation

MAGIC = b"HSD1"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_LAYER = struct.Struct("<IQ")


@dataclass
class HiddenStateDump:
    layers: list[np.ndarray] = field(default_factory=list)  # each (n_vectors, dim), float64

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def __eq__(self, other):
        if not isinstance(other, HiddenStateDump) or self.n_layers != other.n_layers:
            return False
        return all(a.shape == b.shape and np.array_equal(a, b)
                   for a, b in zip(self.layers, other.layers))


def encode_dump(dump: HiddenStateDump) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, dump.n_layers)]
    for i, layer in enumerate(dump.layers):
        layer = np.asarray(layer)
        if layer.ndim != 2:
            raise PreconditionError(f"layer {i}: expected (n_vectors, dim), got shape {layer.shape}")
        n_vectors, dim = layer.shape
        parts.append(_LAYER.pack(dim, n_vectors))
        parts.append(np.ascontiguousarray(layer, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_dump(data: bytes) -> HiddenStateDump:
    if len(data) < _HEADER.size:
        raise DumpFormatError(
            f"truncated header: expected {_HEADER.size} bytes, got {len(data)}")
    magic, version, n_layers = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DumpFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DumpFormatError(f"unsupported version {version}, expected {VERSION}")
    offset = _HEADER.size
    layers = []
    for i in range(n_layers):
        if len(data) < offset + _LAYER.size:
            raise DumpFormatError(
                f"layer {i}: truncated layer header: expected {offset + _LAYER.size} bytes, "
                f"got {len(data)}")
        dim, n_vectors = _LAYER.unpack_from(data, offset)
        offset += _LAYER.size
        end = offset + 4 * dim * n_vectors
        if len(data) < end:
            raise DumpFormatError(
                f"layer {i}: truncated payload: expected {end} bytes, got {len(data)}")
        values = np.frombuffer(data, dtype="<f4", count=dim * n_vectors, offset=offset)
        layers.append(values.astype(np.float64).reshape(n_vectors, dim))
        offset = end
    if offset != len(data):
        raise DumpFormatError(f"trailing bytes: expected {offset} bytes, got {len(data)}")
    return HiddenStateDump(layers)


def write_dump(dump: HiddenStateDump, path) -> None:
    Path(path).write_bytes(encode_dump(dump))


def read_dump(path) -> HiddenStateDump:
    return decode_dump(Path(path).read_bytes())


@dataclass(frozen=True)
class LayerReport:
    layer_index: int
    cosine: AnisotropyEstimate
    drift_norm: float


@dataclass(frozen=True)
class DumpAnalysis:
    layers: list[LayerReport]
    correlation: DriftCorrelation | None


def layer_reports(dump: HiddenStateDump, n_pairs: int = DEFAULT_PAIRS,
                  seed: int = 0) -> list[LayerReport]:
    """Mean cosine and drift norm per layer; layer ``i`` samples pairs from sub-stream ``i``."""
    if dump.n_layers == 0:
        raise PreconditionError("dump has no layers")
    root = RngStream(seed)
    reports = []
    for i, layer in enumerate(dump.layers):
        if layer.shape[0] < 2:
            raise PreconditionError(f"layer {i}: need >= 2 vectors, got {layer.shape[0]}")
        if layer.shape[1] < 1:
            raise PreconditionError(f"layer {i}: zero-dimensional vectors")
        try:
            est = avg_pairwise_cosine(layer, n_pairs, root.substream(i))
        except DegenerateRepresentationError as exc:
            raise DegenerateRepresentationError(f"layer {i}: {exc}", index=exc.index) from exc
        reports.append(LayerReport(i, est, drift_norm(layer)))
    return reports


def analyze_dump(dump: HiddenStateDump, n_pairs: int = DEFAULT_PAIRS, seed: int = 0) -> DumpAnalysis:
    """Per-layer report plus drift-vs-anisotropy correlation across layers.

    Raises ``PreconditionError`` for fewer than 3 layers; use
    :func:`layer_reports` to get the per-layer part alone.
    """
    reports = layer_reports(dump, n_pairs, seed)
    corr = drift_correlation([(r.drift_norm, r.cosine.mean_cosine) for r in reports])
    return DumpAnalysis(reports, corr)
