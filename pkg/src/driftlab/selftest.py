"""Fast invariant checks on a toy-sized block, for ``driftlab selftest``."""

from __future__ import annotations

import math

import numpy as np

from .experiments import find_fixed_point, interpolated_crossing, prepare, qk_residuals, run_sweep
from .metrics import avg_pairwise_cosine, exact_pairwise_cosine
from .numerics import RngStream, erf_approx, layer_norm, softmax_rows
from .stats import spearman
from .transformer_block import BlockConfig, forward

TOY = BlockConfig(d_model=64, n_heads=4, d_ff=256, vocab_size=500, seq_len=32, n_sequences=4)


def _softmax_rows_sum():
    rng = RngStream(1)
    m = rng.normal((50, 40)) * 1e4
    return float(np.abs(softmax_rows(m).sum(axis=1) - 1).max()) <= 1e-12


def _layer_norm_moments():
    v = RngStream(2).normal((20, 64))
    out = layer_norm(v, np.ones(64), np.zeros(64), 1e-12)
    return (np.abs(out.mean(axis=1)).max() <= 1e-12
            and np.abs(out.std(axis=1) - 1).max() <= 1e-6)


def _erf_accuracy():
    xs = np.linspace(-6, 6, 2001)
    return max(abs(erf_approx(x) - math.erf(x)) for x in xs) <= 1.5e-7


def _qk_identity():
    setup = prepare(TOY, 3)
    return all(max(r.q.max(), r.k.max()) <= 1e-9
               for r in (qk_residuals(setup, n) for n in (0.0, 5.0, 30.0)))


def _capture_invariance():
    setup = prepare(TOY, 3)
    x = setup.biased(4.0)
    a, _ = forward(setup.params, x, capture=False)
    b, _ = forward(setup.params, x, capture=True)
    return np.array_equal(a, b)


def _anisotropy_estimator():
    v = RngStream(4).normal((200, 16)) + 0.5
    exact = exact_pairwise_cosine(v)
    est = avg_pairwise_cosine(v, 5000, RngStream(5))
    return abs(est.mean_cosine - exact) <= 4 * est.stderr


def _fixed_point_consistency():
    grid = np.linspace(0.0, 16.0, 17)
    crossing = interpolated_crossing(run_sweep(TOY, grid, 3, n_pairs=500, capture=False))
    fp = find_fixed_point(TOY, 1e-3, (1.0, 16.0), 3)
    return crossing is not None and abs(crossing - fp.n_star) <= 1.0


def _spearman_monotone():
    r = spearman([1, 2, 3, 4, 5], [2, 4, 8, 16, 32])
    return r.coefficient == 1.0 and r.p_value == 2 / 120


CHECKS = [
    ("softmax rows sum to 1 at |x|~1e4", _softmax_rows_sum),
    ("layer_norm zero mean / unit std", _layer_norm_moments),
    ("erf_approx within 1.5e-7", _erf_accuracy),
    ("mean Q/K equals affine image of mean input", _qk_identity),
    ("capture flag leaves output bit-identical", _capture_invariance),
    ("sampled anisotropy within 4 stderr of exact", _anisotropy_estimator),
    ("sweep crossing agrees with bisection", _fixed_point_consistency),
    ("spearman exact p for monotone n=5", _spearman_monotone),
]


def run_selftest(out=print) -> bool:
    ok_all = True
    for name, check in CHECKS:
        ok = bool(check())
        ok_all &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}")
    return ok_all
