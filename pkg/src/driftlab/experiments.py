"""Bias-norm sweeps, the norm fixed point, and the query/key mean identity.

Each driver samples the block parameters, the input batch and the bias
direction once from ``master_seed`` and only rescales the bias across
norms, so measurements at different norms are directly comparable.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import PreconditionError
from .metrics import (
    DEFAULT_PAIRS,
    AnisotropyEstimate,
    QKStats,
    SoftmaxStats,
    avg_pairwise_cosine,
    mean_row_norm,
    presoftmax_spread,
    qk_stats,
    softmax_stats,
)
from .numerics import DEFAULT_BINS, RngStream
from .transformer_block import (
    BlockConfig,
    BlockParams,
    forward,
    init_params,
    make_bias,
    project_qk,
    sample_inputs,
)

# sub-streams of master_seed; params use config.seed := master_seed directly
STREAM_INPUTS = 1
STREAM_BIAS = 2
STREAM_PAIRS = 3
STREAM_QK_PAIRS = 4
STREAM_DIRECTIONS = 5

DEFAULT_GRID = tuple(float(x) for x in np.linspace(0.0, 40.0, 41))


@dataclass(frozen=True)
class SweepRecord:
    bias_norm: float
    input_cosine: AnisotropyEstimate
    output_cosine: AnisotropyEstimate
    input_mean_norm: float
    output_mean_norm: float
    softmax: SoftmaxStats | None
    qk: QKStats | None
    presoftmax_mean: float | None
    presoftmax_std: float | None
    # (edges, counts) of the pre-softmax scores at this norm
    presoftmax_hist: tuple[np.ndarray, np.ndarray] | None = None


@dataclass(frozen=True)
class FixedPointResult:
    n_star: float
    residual: float
    bracket: tuple[float, float]
    iterations: int


@dataclass(frozen=True)
class QKDriftResiduals:
    bias_norm: float
    q: np.ndarray  # (n_heads,)
    k: np.ndarray


@dataclass(frozen=True)
class Setup:
    """Frozen ingredients of one experiment: params, unbiased inputs, unit bias direction."""

    config: BlockConfig
    params: BlockParams
    inputs: np.ndarray
    direction: np.ndarray

    def biased(self, norm: float) -> np.ndarray:
        if norm < 0:
            raise PreconditionError(f"bias norm must be >= 0, got {norm}")
        return self.inputs + self.direction * norm


@lru_cache(maxsize=1)
def prepare(config: BlockConfig, master_seed: int) -> Setup:
    """Sample params, inputs and direction for ``master_seed`` (cached, last one only)."""
    config = dataclasses.replace(config, seed=master_seed)
    params = init_params(config)
    root = RngStream(master_seed)
    inputs = sample_inputs(params, config, root.substream(STREAM_INPUTS))
    direction = make_bias(root.substream(STREAM_BIAS), config.d_model, 1.0)
    for arr in (inputs, direction, *params.arrays().values()):
        arr.flags.writeable = False
    return Setup(config, params, inputs, direction)


def measure(setup: Setup, norm: float, n_pairs: int = DEFAULT_PAIRS, capture: bool = True,
            bins: int = DEFAULT_BINS, median: str = "row") -> SweepRecord:
    """Run the block at one bias norm and collect every metric.

    Input and output cosines use the same index pairs (one pair stream per
    seed, reused at every norm), so their difference is a paired comparison.
    """
    x = setup.biased(norm)
    out, trace = forward(setup.params, x, capture=capture)
    pair_stream = RngStream(setup.config.seed).substream(STREAM_PAIRS)
    in_cos = avg_pairwise_cosine(x, n_pairs, pair_stream.substream(0))
    out_cos = avg_pairwise_cosine(out, n_pairs, pair_stream.substream(0))
    sm = qk = mean = std = hist = None
    if trace is not None:
        sm = softmax_stats(trace, median=median)
        qk = qk_stats(trace, n_pairs, RngStream(setup.config.seed).substream(STREAM_QK_PAIRS))
        spread = presoftmax_spread(trace, bins=bins)
        mean, std, hist = spread.mean, spread.std, (spread.edges, spread.counts)
        del trace
    return SweepRecord(
        bias_norm=float(norm),
        input_cosine=in_cos,
        output_cosine=out_cos,
        input_mean_norm=mean_row_norm(x),
        output_mean_norm=mean_row_norm(out),
        softmax=sm, qk=qk, presoftmax_mean=mean, presoftmax_std=std,
        presoftmax_hist=hist,
    )


def _check_grid(norms) -> list[float]:
    norms = [float(n) for n in norms]
    if not norms:
        raise PreconditionError("bias-norm grid is empty")
    if any(n < 0 or not np.isfinite(n) for n in norms):
        raise PreconditionError("bias norms must be finite and >= 0")
    return norms


def run_sweep(config: BlockConfig, norms=DEFAULT_GRID, master_seed: int = 0,
              n_pairs: int = DEFAULT_PAIRS, capture: bool = True, bins: int = DEFAULT_BINS,
              median: str = "row", progress=None) -> list[SweepRecord]:
    """One :class:`SweepRecord` per grid point, in grid order."""
    norms = _check_grid(norms)
    setup = prepare(config, master_seed)
    records = []
    for i, n in enumerate(norms):
        records.append(measure(setup, n, n_pairs, capture, bins, median))
        if progress is not None:
            progress(i, records[-1])
    return records


def run_multi_direction_sweep(config: BlockConfig, norms=DEFAULT_GRID, master_seed: int = 0,
                              n_directions: int = 3, n_pairs: int = DEFAULT_PAIRS,
                              capture: bool = True) -> list[list[SweepRecord]]:
    """Repeat the sweep with ``n_directions`` independent bias directions.

    Params and inputs stay those of ``master_seed``; direction ``j`` comes
    from sub-stream ``(STREAM_DIRECTIONS, j)``. Summarize with
    :func:`aggregate_records`.
    """
    norms = _check_grid(norms)
    if n_directions < 1:
        raise PreconditionError("n_directions must be >= 1")
    base = prepare(config, master_seed)
    root = RngStream(master_seed).substream(STREAM_DIRECTIONS)
    sweeps = []
    for j in range(n_directions):
        direction = make_bias(root.substream(j), config.d_model, 1.0)
        setup = dataclasses.replace(base, direction=direction)
        sweeps.append([measure(setup, n, n_pairs, capture) for n in norms])
    return sweeps


def record_row(rec: SweepRecord) -> dict[str, float]:
    """Flat scalar view of a record, keyed by the sweep CSV column names."""
    nan = float("nan")
    sm, qk = rec.softmax, rec.qk
    return {
        "N": rec.bias_norm,
        "input_cos": rec.input_cosine.mean_cosine,
        "input_cos_se": rec.input_cosine.stderr,
        "output_cos": rec.output_cosine.mean_cosine,
        "output_cos_se": rec.output_cosine.stderr,
        "input_norm": rec.input_mean_norm,
        "output_norm": rec.output_mean_norm,
        "att_max": sm.avg_max if sm else nan,
        "att_median": sm.avg_median if sm else nan,
        "att_min": sm.avg_min if sm else nan,
        "seq_max": sm.seq_max if sm else nan,
        "seq_min": sm.seq_min if sm else nan,
        "q_norm": qk.mean_q_norm if qk else nan,
        "k_norm": qk.mean_k_norm if qk else nan,
        "presoftmax_std": rec.presoftmax_std if rec.presoftmax_std is not None else nan,
    }


def aggregate_records(sweeps: list[list[SweepRecord]]) -> list[dict[str, tuple[float, float]]]:
    """Per grid point, ``column -> (mean, std)`` across repeated sweeps."""
    out = []
    for column in zip(*sweeps):
        rows = [record_row(r) for r in column]
        out.append({key: (float(np.mean([r[key] for r in rows])),
                          float(np.std([r[key] for r in rows])))
                    for key in rows[0]})
    return out


def norm_gap(setup: Setup, norm: float) -> float:
    """``E||T(x+b)|| - E||x+b||`` at bias norm ``norm``."""
    x = setup.biased(norm)
    out, _ = forward(setup.params, x, capture=False)
    return mean_row_norm(out) - mean_row_norm(x)


def bisect(g, lo: float, hi: float, tolerance: float, min_width: float = 1e-6,
           max_iter: int = 200) -> FixedPointResult:
    """Bisection on a sign change of ``g`` over ``[lo, hi]``.

    Stops once ``|g(mid)| <= tolerance`` or the bracket is narrower than
    ``min_width``. The returned bracket still contains the root.
    """
    if tolerance <= 0:
        raise PreconditionError("tolerance must be positive")
    if not lo < hi:
        raise PreconditionError(f"empty bracket [{lo}, {hi}]")
    g_lo, g_hi = g(lo), g(hi)
    if g_lo == 0.0:
        return FixedPointResult(lo, 0.0, (lo, lo), 0)
    if g_hi == 0.0:
        return FixedPointResult(hi, 0.0, (hi, hi), 0)
    if g_lo * g_hi > 0:
        raise PreconditionError(
            f"no sign change on [{lo}, {hi}]: g(lo)={g_lo:.6g}, g(hi)={g_hi:.6g}")
    mid, g_mid = lo, g_lo
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        g_mid = g(mid)
        if abs(g_mid) <= tolerance or hi - lo <= min_width:
            return FixedPointResult(mid, abs(g_mid), (lo, hi), it)
        if (g_mid > 0) == (g_lo > 0):
            lo, g_lo = mid, g_mid
        else:
            hi = mid
    return FixedPointResult(mid, abs(g_mid), (lo, hi), max_iter)


def find_fixed_point(config: BlockConfig, tolerance: float = 0.1,
                     bracket: tuple[float, float] = (1.0, 100.0),
                     master_seed: int = 0) -> FixedPointResult:
    """Bias norm where mean output norm meets mean input norm."""
    setup = prepare(config, master_seed)
    lo, hi = bracket
    if lo < 0:
        raise PreconditionError("bracket must lie in [0, inf)")
    return bisect(lambda n: norm_gap(setup, n), float(lo), float(hi), tolerance)


def interpolated_crossing(records: list[SweepRecord]) -> float | None:
    """First zero of ``output_norm - input_norm`` along a sweep, by linear interpolation."""
    gaps = [r.output_mean_norm - r.input_mean_norm for r in records]
    for (a, ga), (b, gb) in zip(zip(records, gaps), zip(records[1:], gaps[1:])):
        if ga == 0.0:
            return a.bias_norm
        if ga * gb < 0:
            return a.bias_norm + (b.bias_norm - a.bias_norm) * ga / (ga - gb)
    return None


def qk_residuals(setup: Setup, norm: float) -> QKDriftResiduals:
    """Relative gap between the mean query/key row and the affine image of the mean input.

    Means pool all sequences and positions. ``eps`` keeps the ratio finite
    when the affine image vanishes.
    """
    eps = 1e-30
    cfg, params = setup.config, setup.params
    x = setup.biased(norm)
    q, k = project_qk(params, x)
    x_bar = x.reshape(-1, cfg.d_model).mean(axis=0)
    dh = cfg.d_head
    res = {}
    for name, act, w, b in (("q", q, params.w_q, params.b_q), ("k", k, params.w_k, params.b_k)):
        predicted = (x_bar @ w + b).reshape(cfg.n_heads, dh)
        observed = act.mean(axis=(0, 2))
        res[name] = (np.linalg.norm(observed - predicted, axis=1)
                     / (np.linalg.norm(predicted, axis=1) + eps))
    return QKDriftResiduals(float(norm), res["q"], res["k"])


def qk_drift_check(config: BlockConfig, bias_norm: float, master_seed: int = 0) -> QKDriftResiduals:
    return qk_residuals(prepare(config, master_seed), bias_norm)
