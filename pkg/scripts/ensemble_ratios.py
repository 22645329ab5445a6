"""Two-weight ratios over an ensemble of random doubling pairs.

Writes a long-format CSV (beta, seed, quantity, value) with the operator
norm, testing constants, A2, and the ratio N / (sqrt A2 + T + T*).

    python3 scripts/ensemble_ratios.py --depth 8 --seeds 20 --betas 0.25 0.35 0.45 --out ensemble.csv
"""
import argparse
import csv
import sys

import numpy as np

from twlab.constants import a2, cube_testing, pivotal
from twlab.grid import Grid
from twlab.kernel import KernelSpec
from twlab.measure import random_doubling
from twlab.operator import assemble, operator_norm


def instance(depth, beta, seed, kappa):
    grid = Grid(1, depth)
    s, w = random_doubling(grid, beta, 2 * seed), random_doubling(grid, beta, 2 * seed + 1)
    op = assemble(KernelSpec("hilbert"), None, s, w)
    row = {"N": operator_norm(op), "T": cube_testing(op).value, "T_dual": cube_testing(op.adjoint()).value,
           "A2": a2(s, w).value}
    row["ratio"] = row["N"] / (np.sqrt(row["A2"]) + row["T"] + row["T_dual"])
    row["V2"] = pivotal(s, w, 0.0, kappa).value
    return row


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--depth", type=int, default=8)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--betas", type=float, nargs="+", default=[0.25, 0.45])
    ap.add_argument("--kappa", type=int, default=2)
    ap.add_argument("--out", default="-")
    args = ap.parse_args()
    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["beta", "seed", "quantity", "value"])
    summary = {}
    for beta in args.betas:
        for seed in range(args.seeds):
            row = instance(args.depth, beta, seed, args.kappa)
            for k, v in row.items():
                w.writerow([beta, seed, k, repr(float(v))])
            summary.setdefault(beta, []).append(row["ratio"])
    for beta, r in summary.items():
        print(f"beta={beta}: ratio min {min(r):.4f} median {np.median(r):.4f} max {max(r):.4f}", file=sys.stderr)
    if fh is not sys.stdout:
        fh.close()


if __name__ == "__main__":
    main()
