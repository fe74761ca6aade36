"""``driftlab`` command line.

Exit codes: 0 success, 1 precondition violation or usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dump import analyze_dump, layer_reports, read_dump
from .errors import PreconditionError
from .experiments import (
    aggregate_records,
    find_fixed_point,
    qk_drift_check,
    record_row,
    run_multi_direction_sweep,
    run_sweep,
)
from .metrics import DEFAULT_PAIRS
from .numerics import DEFAULT_BINS, RNG_ALGORITHM
from .selftest import run_selftest
from .transformer_block import BlockConfig

SWEEP_COLUMNS = [
    "N", "input_cos", "input_cos_se", "output_cos", "output_cos_se", "input_norm",
    "output_norm", "att_max", "att_median", "att_min", "seq_max", "seq_min",
    "q_norm", "k_norm", "presoftmax_std",
]
LAYER_COLUMNS = ["layer_index", "mean_cosine", "stderr", "drift_norm"]

EXIT_OK, EXIT_PRECONDITION, EXIT_IO = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_PRECONDITION, f"{self.prog}: error: {message}\n")


def _range_arg(text: str, n: int) -> list[float]:
    parts = text.split(":")
    if len(parts) != n:
        raise argparse.ArgumentTypeError(f"expected {n} ':'-separated numbers, got {text!r}")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number in {text!r}") from None


def norms_arg(text: str) -> list[float]:
    """``lo:hi:steps`` -> ``steps`` evenly spaced norms, endpoints included."""
    lo, hi, steps = _range_arg(text, 3)
    if steps < 1 or steps != int(steps):
        raise argparse.ArgumentTypeError(f"steps must be a positive integer, got {steps}")
    return [float(x) for x in np.linspace(lo, hi, int(steps))]


def bracket_arg(text: str) -> tuple[float, float]:
    lo, hi = _range_arg(text, 2)
    return lo, hi


def _fmt(x) -> str:
    return repr(float(x))


def _add_block_args(p: argparse.ArgumentParser) -> None:
    d = BlockConfig()
    p.add_argument("--d-model", type=int, default=d.d_model)
    p.add_argument("--n-heads", type=int, default=d.n_heads)
    p.add_argument("--d-ff", type=int, default=d.d_ff)
    p.add_argument("--vocab", type=int, default=d.vocab_size)
    p.add_argument("--seq-len", type=int, default=d.seq_len)
    p.add_argument("--n-seq", type=int, default=d.n_sequences)
    p.add_argument("--init-std", type=float, default=d.init_std)
    p.add_argument("--attention-only", action="store_true",
                   help="drop the FFN sublayer (output is the first LayerNorm)")
    p.add_argument("--positional", action="store_true",
                   help="add randomly initialized positional embeddings to the inputs")
    p.add_argument("--seed", type=int, default=0)


def _config(args) -> BlockConfig:
    return BlockConfig(
        d_model=args.d_model, n_heads=args.n_heads, d_ff=args.d_ff, vocab_size=args.vocab,
        seq_len=args.seq_len, n_sequences=args.n_seq, init_std=args.init_std,
        seed=args.seed, attention_only=args.attention_only, positional=args.positional,
    )


_UNRECORDED = {"--out": 1, "--stamp": 0, "-v": 0, "--verbose": 0}


def _recorded_argv(argv: list[str]) -> list[str]:
    """argv minus options that do not affect file contents (output dir, verbosity)."""
    kept, skip = [], 0
    for tok in argv:
        if skip:
            skip -= 1
            continue
        name = tok.split("=", 1)[0]
        if name in _UNRECORDED:
            skip = _UNRECORDED[name] if "=" not in tok else 0
            continue
        kept.append(tok)
    return kept


def _manifest(args, extra: dict) -> dict:
    manifest = {
        "tool": "driftlab",
        "tool_version": __version__,
        "command": args.command,
        "argv": _recorded_argv(args.argv),
        "rng": RNG_ALGORITHM,
        "float": "float64 in memory",
        **extra,
    }
    if getattr(args, "stamp", False):
        manifest["timestamp_utc"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    return manifest


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(i, rec):
        if args.verbose:
            print(f"N={rec.bias_norm:g} done ({i + 1}/{len(args.norms)})", file=sys.stderr)

    if args.directions == 1:
        records = run_sweep(cfg, args.norms, args.seed, n_pairs=args.pairs, bins=args.bins,
                            median=args.median, progress=progress)
        _write_csv(out / "sweep.csv", SWEEP_COLUMNS,
                   ([_fmt(record_row(r)[c]) for c in SWEEP_COLUMNS] for r in records))
        hist_rows = []
        for r in records:
            edges, counts = r.presoftmax_hist
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                hist_rows.append([_fmt(r.bias_norm), _fmt(lo), _fmt(hi), str(int(c))])
        _write_csv(out / "histograms.csv", ["N", "bin_lo", "bin_hi", "count"], hist_rows)
    else:
        sweeps = run_multi_direction_sweep(cfg, args.norms, args.seed, args.directions,
                                           n_pairs=args.pairs)
        agg = aggregate_records(sweeps)
        _write_csv(out / "sweep.csv", SWEEP_COLUMNS,
                   ([_fmt(a[c][0]) for c in SWEEP_COLUMNS] for a in agg))
        _write_csv(out / "sweep_std.csv", SWEEP_COLUMNS,
                   ([_fmt(a[c][1]) for c in SWEEP_COLUMNS] for a in agg))
    _write_json(out / "manifest.json", _manifest(args, {
        "config": cfg.to_dict(),
        "master_seed": args.seed,
        "grid": args.norms,
        "n_pairs": args.pairs,
        "histogram_bins": args.bins,
        "histogram_range": "auto [min, max] per bias norm",
        "median": args.median,
        "directions": args.directions,
        "pooling": "sequences and positions",
    }))
    print(f"wrote {out / 'sweep.csv'} ({len(args.norms)} rows)")
    return EXIT_OK


def cmd_fixed_point(args) -> int:
    cfg = _config(args)
    res = find_fixed_point(cfg, args.tol, args.bracket, args.seed)
    lines = [
        f"n_star {_fmt(res.n_star)}",
        f"residual {_fmt(res.residual)}",
        f"iterations {res.iterations}",
        f"bracket {_fmt(res.bracket[0])} {_fmt(res.bracket[1])}",
    ]
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "fixed_point.json", {
            "n_star": res.n_star, "residual": res.residual,
            "iterations": res.iterations, "bracket": list(res.bracket)})
        _write_json(out / "manifest.json", _manifest(args, {
            "config": cfg.to_dict(), "master_seed": args.seed,
            "tolerance": args.tol, "bracket": list(args.bracket)}))
    return EXIT_OK


def cmd_qk_check(args) -> int:
    cfg = _config(args)
    res = qk_drift_check(cfg, args.norm, args.seed)
    print("head q_residual k_residual")
    for h, (q, k) in enumerate(zip(res.q, res.k)):
        print(f"{h} {q:.3e} {k:.3e}")
    worst = max(res.q.max(), res.k.max())
    print(f"max {worst:.3e} ({'within' if worst <= 1e-9 else 'exceeds'} 1e-9)")
    return EXIT_OK


def cmd_analyze(args) -> int:
    dump = read_dump(args.dump)
    if dump.n_layers == 0:
        raise PreconditionError("dump has 0 layers; need >= 3 for a drift correlation")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = layer_reports(dump, args.pairs, args.seed)
    _write_csv(out / "layers.csv", LAYER_COLUMNS, (
        [str(r.layer_index), _fmt(r.cosine.mean_cosine), _fmt(r.cosine.stderr),
         _fmt(r.drift_norm)] for r in reports))
    manifest = _manifest(args, {"dump": str(args.dump), "n_pairs": args.pairs,
                                "seed": args.seed, "n_layers": dump.n_layers})
    _write_json(out / "manifest.json", manifest)
    for r in reports:
        print(f"layer {r.layer_index}: cos {r.cosine.mean_cosine:.4f} "
              f"+/- {r.cosine.stderr:.4f}  drift {r.drift_norm:.4f}")
    if dump.n_layers < 3:
        raise PreconditionError(
            f"dump has {dump.n_layers} layers; need >= 3 for a drift correlation")
    corr = analyze_dump(dump, args.pairs, args.seed).correlation
    doc = {"alpha": corr.alpha, "verdict": corr.verdict}
    for res in (corr.spearman, corr.pearson):
        doc[res.method] = {"coefficient": res.coefficient, "p_value": res.p_value,
                           "n": res.n, "p_method": res.p_method}
    _write_json(out / "correlation.json", doc)
    print(f"spearman rho {corr.spearman.coefficient:.4f} p {corr.spearman.p_value:.4g} "
          f"({corr.spearman.p_method})")
    print(f"pearson  r   {corr.pearson.coefficient:.4f} p {corr.pearson.p_value:.4g}")
    print(f"verdict: {corr.verdict} (alpha {corr.alpha})")
    return EXIT_OK


def cmd_selftest(args) -> int:
    return EXIT_OK if run_selftest() else EXIT_PRECONDITION


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="driftlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep", help="bias-norm sweep of one block")
    _add_block_args(p)
    p.add_argument("--norms", type=norms_arg, default=norms_arg("0:40:41"), metavar="LO:HI:STEPS")
    p.add_argument("--pairs", type=int, default=DEFAULT_PAIRS)
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--median", choices=["row", "global"], default="row")
    p.add_argument("--directions", type=int, default=1,
                   help="independent bias directions; >1 writes mean and std tables")
    p.add_argument("--out", default="sweep_out", metavar="DIR")
    p.add_argument("--stamp", action="store_true", help="record wall-clock time in the manifest")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fixed-point", help="bisect for the norm fixed point")
    _add_block_args(p)
    p.add_argument("--tol", type=float, default=0.1)
    p.add_argument("--bracket", type=bracket_arg, default=(1.0, 100.0), metavar="LO:HI")
    p.add_argument("--out", default=None, metavar="DIR")
    p.add_argument("--stamp", action="store_true")
    p.set_defaults(func=cmd_fixed_point)

    p = sub.add_parser("qk-check", help="mean query/key vs affine image of the mean input")
    _add_block_args(p)
    p.add_argument("--norm", type=float, default=0.0)
    p.set_defaults(func=cmd_qk_check)

    p = sub.add_parser("analyze", help="anisotropy/drift report for an HSD1 dump")
    p.add_argument("--dump", required=True, metavar="PATH")
    p.add_argument("--pairs", type=int, default=DEFAULT_PAIRS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="analyze_out", metavar="DIR")
    p.add_argument("--stamp", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("selftest", help="fast invariant checks on a toy block")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except PreconditionError as exc:
        print(f"driftlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except OSError as exc:
        print(f"driftlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
