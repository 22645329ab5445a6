"""Calibrate the recorded constants used by the acceptance suite.

Each constant is the largest ratio observed over a calibration ensemble that
contains the acceptance ensemble (seeds 0..9 per beta) plus further seeds, so
the acceptance run checks that nothing has drifted above what was recorded.

    python3 scripts/record_constants.py [--seeds 40] [--out tests/data/recorded_constants.json]
"""
import argparse
import itertools
import json
from pathlib import Path

import numpy as np

from twlab.constants import (a2, b_testing, cancellation, cube_testing, pivotal_lemma_suite,
                             poisson_inequality_suite)
from twlab.corona import CoronaConfig, build_corona, default_goodness, verify_corona
from twlab.grid import Grid
from twlab.kernel import KernelSpec, TruncationSpec
from twlab.measure import random_doubling
from twlab.operator import assemble, operator_norm

HIL = KernelSpec("hilbert")
RIESZ = KernelSpec("riesz", 0.0, 2, 0)
BETAS = (0.25, 0.45)


def pair(grid, beta, seed):
    return random_doubling(grid, beta, 2 * seed), random_doubling(grid, beta, 2 * seed + 1)


def main_theorem(seeds):
    upper, lower = [], []
    for beta, seed in itertools.product(BETAS, range(seeds)):
        s, w = pair(Grid(1, 8), beta, seed)
        op = assemble(HIL, None, s, w)
        N = operator_norm(op)
        A = a2(s, w).value
        upper.append(N / (np.sqrt(A) + cube_testing(op).value + cube_testing(op.adjoint()).value))
        lower.append(np.sqrt(A) / N)
    return {"C_max": max(upper), "C_lower": max(lower), "seeds": 10}


def corona(seeds):
    c0 = 0.0
    for beta, seed in itertools.product(BETAS, range(seeds)):
        grid = Grid(1, 8)
        s, w = pair(grid, beta, seed)
        f = np.random.default_rng(seed).standard_normal(grid.n_leaves)
        for kappa in (1, 2):
            tree = build_corona(f, s, w, CoronaConfig(4.0, kappa))
            c0 = max(c0, verify_corona(tree, f, s, w).quasi_orthogonality)
    return {"C0_squared": c0}


def ball(seeds, delta=0.5):
    log_term = 1.0 / np.sqrt(np.log(1.0 / delta))
    band, both, back = [], [], []
    for beta, seed in itertools.product(BETAS, range(seeds)):
        # balls and cubes coincide on the line, so the comparison runs in the plane
        s, w = pair(Grid(2, 5), beta / 2, seed)
        op = assemble(RIESZ, None, s, w)
        T, TB = cube_testing(op).value, b_testing(op, "ball").value
        FTB = b_testing(op, "ball", delta_full=delta).value
        N, A = operator_norm(op), a2(s, w).value
        band.append(TB / T)
        both.append(FTB / (TB + np.sqrt(A) + log_term * N))
        back.append(T / (FTB + log_term * N))
    return {"band": [min(band), max(band)], "full_vs_ball": max(both), "cube_vs_full": max(back)}


def cancel(seeds):
    out = {"cube": 0.0, "euclidean": 0.0}
    for beta, seed in itertools.product(BETAS, range(seeds)):
        s, w = pair(Grid(1, 7), beta, seed)
        op = assemble(HIL, None, s, w)
        den = (cube_testing(op).value + np.sqrt(a2(s, w).value)) ** 2
        for ann in out:
            out[ann] = max(out[ann], cancellation(HIL, op.trunc, s, w, ann).value / den)
    return out


def ratio_suites(n):
    grid = Grid(1, 8)
    s, w = pair(grid, 0.35, 0)
    pois = poisson_inequality_suite(s, 2, 0.0, default_goodness(2).eps, n_samples=n, seed=0)
    op = assemble(HIL, TruncationSpec.default(grid, 2), s, w, q_src=1, q_tgt=3)
    piv = pivotal_lemma_suite(HIL, op.trunc, s, w, 2, n_samples=n, seed=0, op=op)
    return {"poisson_inequality": pois.constant, "pivotal_lemma": piv.constant, "samples": n}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=40, help="calibration seeds per beta (>= 10)")
    ap.add_argument("--samples", type=int, default=1000, help="samples per ratio suite")
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "data" /
                                         "recorded_constants.json"))
    args = ap.parse_args()
    if args.seeds < 10:
        ap.error("the calibration ensemble must contain the acceptance seeds 0..9")
    rec = {"main_theorem": main_theorem(args.seeds), "corona": corona(args.seeds), "ball_testing": ball(args.seeds),
           "cancellation": cancel(args.seeds), "ratio_suites": ratio_suites(args.samples),
           "calibration_seeds_per_beta": args.seeds}
    Path(args.out).write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    print(json.dumps(rec, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
