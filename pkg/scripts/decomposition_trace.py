"""Decompose <T f, g> for one random instance and print every residual and part.

    python3 scripts/decomposition_trace.py --depth 8 --kappa 1 --seed 3
"""
import argparse

import numpy as np

from twlab import forms
from twlab.constants import a2, cube_testing, pivotal
from twlab.corona import CoronaConfig, build_corona, default_goodness, shifted
from twlab.grid import Grid
from twlab.kernel import KernelSpec, TruncationSpec
from twlab.measure import random_doubling
from twlab.operator import assemble


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--depth", type=int, default=8)
    ap.add_argument("--kappa", type=int, default=2)
    ap.add_argument("--beta", type=float, default=0.3)
    ap.add_argument("--gamma", type=float, default=4.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write the ledger here")
    args = ap.parse_args()

    grid = Grid(1, args.depth)
    s = random_doubling(grid, args.beta, 2 * args.seed)
    w = random_doubling(grid, args.beta, 2 * args.seed + 1)
    f, g = np.random.default_rng(args.seed).standard_normal((2, grid.n_leaves))
    k = args.kappa
    spec = KernelSpec("hilbert")
    op = assemble(spec, TruncationSpec.default(grid, k), s, w, q_src=k, q_tgt=2 * k - 1)
    cfg = default_goodness(k)
    tree = build_corona(f, s, w, CoronaConfig(args.gamma, k))
    consts = {"T": cube_testing(op).value, "T_kappa": cube_testing(op, "kappa", k).value,
              "A2": a2(s, w).value, "V2": pivotal(s, w, 0.0, k).value}
    led = forms.decompose(op, f, g, k, tree, shifted(tree, cfg.tau), cfg, consts)

    print(f"{len(tree.stopping)} stopping cubes in {len(tree.generations)} generations")
    print(f"pairing {led.pairing['direct']:+.6e}")
    for name, v in led.size["parts"].items():
        print(f"  size {name:<11} {v:+.6e}")
    for name, v in led.canonical["parts"].items():
        print(f"  canonical {name:<9} {v:+.6e}")
    for F, blk in led.ntv.items():
        if blk["n_pairs"]:
            parts = " ".join(f"{n}={v:+.3e}" for n, v in blk["parts"].items())
            print(f"  F={grid.cube_list[F]} block {blk['block']:+.3e}: {parts}")
    for name, v in sorted(led.residuals().items()):
        print(f"residual {name:<30} {v:.2e}")
    for name, v in sorted(led.ratios.items()):
        print(f"ratio {name:<22} {v:.3e}")
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(led.to_json())


if __name__ == "__main__":
    main()
