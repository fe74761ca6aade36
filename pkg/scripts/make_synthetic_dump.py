"""Write a synthetic HSD1 dump for trying out ``driftlab analyze``.

    python scripts/make_synthetic_dump.py drift drift.hsd --seed 0
    driftlab analyze --dump drift.hsd --out analyze_drift
"""

import argparse

from driftlab.dump import write_dump
from driftlab.synthetic import drift_dump, isotropic_dump


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("kind", choices=["drift", "isotropic"])
    ap.add_argument("path")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--layers", type=int, default=8)
    ap.add_argument("--vectors", type=int, default=4000)
    ap.add_argument("--dim", type=int, default=32)
    args = ap.parse_args()
    make = drift_dump if args.kind == "drift" else isotropic_dump
    dump = make(args.seed, n_layers=args.layers, n_vectors=args.vectors, dim=args.dim)
    write_dump(dump, args.path)
    print(f"wrote {args.path}: {dump.n_layers} layers of {args.vectors} x {args.dim}")


if __name__ == "__main__":
    main()
