"""How the norm and testing constants move with the truncation scales delta and R.

    python3 scripts/truncation_stability.py --depth 8 --seed 0
"""
import argparse

from twlab.constants import cube_testing
from twlab.grid import Grid
from twlab.kernel import KernelSpec, TruncationSpec
from twlab.measure import random_doubling
from twlab.operator import assemble, operator_norm


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--depth", type=int, default=8)
    ap.add_argument("--beta", type=float, default=0.3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    grid = Grid(1, args.depth)
    s = random_doubling(grid, args.beta, 2 * args.seed)
    w = random_doubling(grid, args.beta, 2 * args.seed + 1)
    print(f"{'delta/leaf':>10} {'R/root':>7} {'N':>10} {'T':>10} {'T*':>10} {'T/N':>7}")
    for dmul in (2, 4, 8, 16):
        for rmul in (0.125, 0.25, 0.5, 1):
            if dmul * grid.leaf_diameter >= rmul * grid.root_diameter:
                continue
            tr = TruncationSpec(dmul * grid.leaf_diameter, rmul * grid.root_diameter)
            op = assemble(KernelSpec("hilbert"), tr, s, w)
            N = operator_norm(op)
            T, Ts = cube_testing(op).value, cube_testing(op.adjoint()).value
            print(f"{dmul:>10} {rmul:>7} {N:>10.4f} {T:>10.4f} {Ts:>10.4f} {T / N:>7.3f}")


if __name__ == "__main__":
    main()
