import dataclasses
import math

import numpy as np
import pytest

from driftlab.errors import PreconditionError
from driftlab.experiments import (
    DEFAULT_GRID,
    aggregate_records,
    bisect,
    find_fixed_point,
    interpolated_crossing,
    measure,
    norm_gap,
    prepare,
    qk_drift_check,
    qk_residuals,
    record_row,
    run_multi_direction_sweep,
    run_sweep,
)
from driftlab.metrics import avg_pairwise_cosine
from driftlab.numerics import RngStream

from conftest import TOY

CSV_COLUMNS = ["N", "input_cos", "input_cos_se", "output_cos", "output_cos_se", "input_norm",
               "output_norm", "att_max", "att_median", "att_min", "seq_max", "seq_min",
               "q_norm", "k_norm", "presoftmax_std"]


@pytest.fixture(scope="module")
def toy_sweep():
    return run_sweep(TOY, norms=np.linspace(0, 40, 11), master_seed=3, n_pairs=2000)


class TestSetup:
    def test_direction_is_unit(self):
        s = prepare(TOY, 0)
        assert np.linalg.norm(s.direction) == pytest.approx(1.0, abs=1e-14)
        assert s.config.seed == 0

    def test_arrays_frozen(self):
        s = prepare(TOY, 0)
        with pytest.raises(ValueError):
            s.inputs[0, 0, 0] = 1.0

    def test_negative_norm(self):
        with pytest.raises(PreconditionError):
            prepare(TOY, 0).biased(-1.0)

    def test_seed_changes_everything(self):
        a, b = prepare(TOY, 0), prepare(TOY, 1)
        assert not np.array_equal(a.inputs, b.inputs)
        assert not np.array_equal(a.direction, b.direction)


class TestSweep:
    def test_default_grid(self):
        assert len(DEFAULT_GRID) == 41 and DEFAULT_GRID[0] == 0.0 and DEFAULT_GRID[-1] == 40.0

    def test_zero_norm_is_unbiased(self, toy_sweep):
        s = prepare(TOY, 3)
        pairs = RngStream(3).substream(3).substream(0)
        assert toy_sweep[0].input_cosine == avg_pairwise_cosine(s.inputs, 2000, pairs)

    def test_output_norm_near_sqrt_d(self, toy_sweep):
        for rec in toy_sweep:
            assert abs(rec.output_mean_norm / math.sqrt(TOY.d_model) - 1) < 0.01

    def test_input_norm_growth(self, toy_sweep):
        s = prepare(TOY, 3)
        flat = s.inputs.reshape(-1, TOY.d_model)
        ms = float((flat ** 2).sum(axis=1).mean())
        for rec in toy_sweep:
            if rec.bias_norm >= 5:
                pred = math.sqrt(ms + rec.bias_norm ** 2)
                assert abs(rec.input_mean_norm / pred - 1) < 0.02

    def test_input_cosine_rises_with_bias(self, toy_sweep):
        cos = [r.input_cosine.mean_cosine for r in toy_sweep]
        assert cos[-1] > 0.99 and cos[-1] > cos[0]

    def test_record_row_columns(self, toy_sweep):
        row = record_row(toy_sweep[2])
        assert list(row) == CSV_COLUMNS
        assert row["N"] == toy_sweep[2].bias_norm

    def test_uncaptured_leaves_nan(self):
        rec = measure(prepare(TOY, 3), 4.0, n_pairs=200, capture=False)
        row = record_row(rec)
        assert rec.softmax is None and math.isnan(row["att_max"]) and math.isnan(row["q_norm"])

    def test_deterministic(self, toy_sweep):
        again = run_sweep(TOY, norms=[toy_sweep[4].bias_norm], master_seed=3, n_pairs=2000)
        assert record_row(again[0]) == record_row(toy_sweep[4])
        np.testing.assert_array_equal(again[0].presoftmax_hist[1], toy_sweep[4].presoftmax_hist[1])

    def test_capture_independent_outputs(self):
        s = prepare(TOY, 3)
        a = measure(s, 10.0, n_pairs=500, capture=True)
        b = measure(s, 10.0, n_pairs=500, capture=False)
        assert a.output_cosine == b.output_cosine and a.output_mean_norm == b.output_mean_norm

    def test_q_norm_grows(self, toy_sweep):
        qn = [r.qk.mean_q_norm for r in toy_sweep]
        assert all(b > a for a, b in zip(qn, qn[1:]))

    def test_bad_grid(self):
        with pytest.raises(PreconditionError):
            run_sweep(TOY, norms=[])
        with pytest.raises(PreconditionError):
            run_sweep(TOY, norms=[0.0, -1.0])

    def test_progress_callback(self):
        seen = []
        run_sweep(TOY, norms=[0.0, 1.0], master_seed=3, n_pairs=100, capture=False,
                  progress=lambda i, rec: seen.append((i, rec.bias_norm)))
        assert seen == [(0, 0.0), (1, 1.0)]


class TestMultiDirection:
    def test_aggregate(self):
        sweeps = run_multi_direction_sweep(TOY, norms=[0.0, 20.0], master_seed=3,
                                           n_directions=3, n_pairs=300, capture=False)
        assert len(sweeps) == 3 and all(len(s) == 2 for s in sweeps)
        # N=0 has no bias, so every direction sees the same batch
        agg = aggregate_records(sweeps)
        assert agg[0]["input_cos"][1] == 0.0
        mean, std = agg[1]["input_norm"]
        vals = [s[1].input_mean_norm for s in sweeps]
        assert mean == pytest.approx(np.mean(vals)) and std == pytest.approx(np.std(vals))
        assert std > 0

    def test_needs_a_direction(self):
        with pytest.raises(PreconditionError):
            run_multi_direction_sweep(TOY, norms=[0.0], n_directions=0)


class TestBisect:
    def test_linear_root(self):
        res = bisect(lambda n: n - 7.3, 0.0, 10.0, 1e-9)
        assert res.n_star == pytest.approx(7.3, abs=1e-6)
        assert res.bracket[0] <= 7.3 <= res.bracket[1]

    def test_residual_within_tolerance(self):
        res = bisect(lambda n: 2.0 - n, 0.0, 10.0, 0.1)
        assert res.residual <= 0.1 and res.iterations >= 1

    def test_endpoint_root(self):
        assert bisect(lambda n: n - 1.0, 1.0, 5.0, 0.1).n_star == 1.0

    def test_no_sign_change(self):
        with pytest.raises(PreconditionError, match="no sign change"):
            bisect(lambda n: n + 1.0, 0.0, 10.0, 0.1)

    @pytest.mark.parametrize("lo,hi,tol", [(5.0, 1.0, 0.1), (1.0, 1.0, 0.1), (0.0, 1.0, 0.0)])
    def test_bad_arguments(self, lo, hi, tol):
        with pytest.raises(PreconditionError):
            bisect(lambda n: n - 0.5, lo, hi, tol)

    def test_min_width_stops_on_step(self):
        # a jump never reaches |g| <= tol; the bracket shrinks around it instead
        res = bisect(lambda n: -1.0 if n < math.pi else 1.0, 0.0, 10.0, 0.1, min_width=1e-6)
        assert res.bracket[0] <= math.pi <= res.bracket[1]
        assert res.bracket[1] - res.bracket[0] <= 1e-6


class TestFixedPoint:
    def test_toy_fixed_point(self, toy_sweep):
        res = find_fixed_point(TOY, tolerance=0.01, bracket=(0.0, 40.0), master_seed=3)
        setup = prepare(TOY, 3)
        assert abs(norm_gap(setup, res.n_star)) <= 0.01
        assert res.bracket[0] <= res.n_star <= res.bracket[1]
        grid_crossing = interpolated_crossing(toy_sweep)
        assert grid_crossing is not None
        assert abs(res.n_star - grid_crossing) <= 4.0  # one grid spacing

    def test_gap_changes_sign(self):
        s = prepare(TOY, 3)
        assert norm_gap(s, 0.0) > 0 > norm_gap(s, 40.0)

    def test_bad_bracket(self):
        with pytest.raises(PreconditionError):
            find_fixed_point(TOY, bracket=(-1.0, 10.0), master_seed=3)
        with pytest.raises(PreconditionError):
            find_fixed_point(TOY, bracket=(20.0, 40.0), master_seed=3)

    def test_interpolated_crossing_hand(self):
        @dataclasses.dataclass
        class R:
            bias_norm: float
            input_mean_norm: float
            output_mean_norm: float
        recs = [R(0.0, 1.0, 3.0), R(2.0, 3.0, 4.0), R(4.0, 5.0, 3.0)]
        assert interpolated_crossing(recs) == pytest.approx(2.0 + 2.0 * 1 / 3)
        assert interpolated_crossing(recs[:2]) is None


class TestQKResiduals:
    @pytest.mark.parametrize("norm", [0.0, 5.0, 30.0])
    def test_identity_holds(self, norm):
        res = qk_drift_check(TOY, norm, master_seed=2)
        assert res.q.shape == (TOY.n_heads,) and res.k.shape == (TOY.n_heads,)
        assert max(res.q.max(), res.k.max()) <= 1e-9

    def test_permutation_invariant(self):
        s = prepare(TOY, 2)
        perm = np.random.default_rng(0).permutation(TOY.seq_len)
        shuffled = dataclasses.replace(s, inputs=s.inputs[:, perm])
        a, b = qk_residuals(s, 5.0), qk_residuals(shuffled, 5.0)
        np.testing.assert_allclose(a.q, b.q, atol=1e-12)

    def test_nonzero_biases(self):
        s = prepare(TOY, 2)
        rng = RngStream(1)
        params = dataclasses.replace(s.params, b_q=rng.normal(TOY.d_model),
                                     b_k=rng.normal(TOY.d_model))
        res = qk_residuals(dataclasses.replace(s, params=params), 10.0)
        assert max(res.q.max(), res.k.max()) <= 1e-9
