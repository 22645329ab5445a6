import itertools

import numpy as np
import pytest
import scipy.integrate as si
from hypothesis import given, strategies as st
from scipy.optimize import LinearConstraint, milp

from twlab.constants import (a2, b_testing, compute_report, cube_testing, pivotal, pivotal_dp, pivotal_lemma_suite,
                             pivotal_scores, poisson, poisson_inequality_suite, shell_integral, wbp, wbp_partners)
from twlab.grid import Cube, Grid
from twlab.kernel import KernelSpec, TruncationSpec, truncated_kernel
from twlab.measure import Measure, random_doubling
from twlab.operator import assemble, operator_norm

HIL = KernelSpec("hilbert")


@pytest.fixture(scope="module")
def pair5():
    g = Grid(1, 5)
    return random_doubling(g, 0.3, 1), random_doubling(g, 0.3, 2)


# ------------------------------------------------------------------ A2
@pytest.mark.parametrize("dim,depth", [(1, 6), (2, 3)])
def test_a2_lebesgue_is_one(dim, depth):
    mu = Measure.lebesgue(Grid(dim, depth))
    assert a2(mu, mu).value == pytest.approx(1.0, rel=1e-12)
    assert a2(mu, mu, cubes="dyadic").value == pytest.approx(1.0, rel=1e-12)


@given(st.floats(0.1, 10.0), st.integers(0, 50))
def test_a2_homogeneity_and_dyadic_bound(c, seed):
    g = Grid(1, 5)
    s, w = random_doubling(g, 0.3, seed), random_doubling(g, 0.3, seed + 100)
    base = a2(s, w).value
    assert a2(s, Measure(g, c * w.densities)).value == pytest.approx(c * base, rel=1e-12)
    assert a2(s, w, cubes="dyadic").value <= base * (1 + 1e-12)


def test_a2_exhaustive_against_naive_loop(pair5):
    s, w = pair5
    g = s.grid
    h = g.leaf_side
    best = 0.0
    for i in range(32):
        for j in range(i + 1, 33):
            best = max(best, s.leaf_masses[i:j].sum() * w.leaf_masses[i:j].sum() / ((j - i) * h) ** 2)
    assert a2(s, w).value == pytest.approx(best, rel=1e-12)


# -------------------------------------------------------------- Poisson
def test_poisson_zero_measure():
    g = Grid(1, 5)
    assert poisson(1, 0.0, Cube(2, (1,)), Measure(g, np.zeros(32))) == 0.0


@pytest.mark.parametrize("m,alpha", [(1, 0.0), (2, 0.0), (3, 0.4)])
def test_poisson_1d_against_quad(pair5, m, alpha):
    s, _ = pair5
    g = s.grid
    for q in (Cube(0, (0,)), Cube(2, (1,)), Cube(4, (13,))):
        c, ell = g.center(q)[0], g.side_of(q)
        val = sum(si.quad(lambda y: ell**m / (ell + abs(y - c)) ** (1 + m - alpha), k * g.leaf_side,
                          (k + 1) * g.leaf_side, epsabs=1e-15, epsrel=1e-13)[0] * s.densities[k]
                  for k in range(g.n_leaves))
        assert poisson(m, alpha, q, s) == pytest.approx(val, rel=1e-10)


def test_poisson_2d_against_quad():
    g = Grid(2, 3)
    mu = random_doubling(g, 0.2, 4)
    q = Cube(1, (0, 1))
    c, ell = g.center(q), g.side_of(q)
    h = g.leaf_side
    val = 0.0
    for k, (i, j) in enumerate(itertools.product(range(8), range(8))):
        f = lambda y2, y1: ell**2 / (ell + np.hypot(y1 - c[0], y2 - c[1])) ** 4
        val += si.dblquad(f, i * h, (i + 1) * h, j * h, (j + 1) * h, epsabs=1e-13, epsrel=1e-10)[0] * mu.densities[k]
    # fixed Gauss cells meet the kink of |y - c| at a leaf corner; 1e-5 is the rule's accuracy there
    assert poisson(2, 0.0, q, mu) == pytest.approx(val, rel=1e-5)


def test_poisson_far_single_leaf():
    g = Grid(1, 8)
    dens = np.zeros(256)
    dens[-1] = 1.0
    q = Cube(8, (0,))
    d = 255.0 * g.leaf_side
    approx = g.leaf_side * g.leaf_side / d**2
    assert poisson(1, 0.0, q, Measure(g, dens)) == pytest.approx(approx, rel=2e-2)


def test_poisson_monotone_in_m_outside(pair5):
    s, _ = pair5
    g = s.grid
    for q in g.cube_list:
        lo, side = g.dilate(q, 3.0)
        mask = (g.overlap_fractions(lo, lo + side) == 0).astype(float)
        vals = [poisson(m, 0.0, q, s, mask) for m in (1, 2, 3, 4)]
        assert all(b <= a * (1 + 1e-12) for a, b in zip(vals, vals[1:]))


# -------------------------------------------------------------- testing
def test_zero_kernel_constants_vanish(pair5):
    s, w = pair5
    op = assemble(KernelSpec("zero"), None, s, w, q_src=2, q_tgt=2)
    for mode in ("plain", "kappa", "triple"):
        assert cube_testing(op, mode, 2).value == 0.0
    assert wbp(op, 2, 2).value == 0.0
    assert b_testing(op).value == 0.0
    assert b_testing(op, delta_full=0.5).value == 0.0
    from twlab.constants import cancellation
    assert cancellation(op.kernel, op.trunc, s, w).value == 0.0


def _column_testing(op, triple=False):
    g = op.grid
    best = 0.0
    for q in g.cube_list:
        f = np.zeros(g.n_leaves)
        f[g.leaf_ids(q)] = 1.0
        v = op.apply(f)
        if triple:
            lo, side = g.dilate(q, 3.0)
            region = g.overlap_fractions(lo, lo + side)
        else:
            region = np.zeros(g.n_leaves)
            region[g.leaf_ids(q)] = 1.0
        best = max(best, np.sqrt((region * op.omega.leaf_masses) @ (v * v) / op.sigma.cube_mass(q)))
    return best


def test_plain_testing_against_columns_lebesgue_depth8():
    mu = Measure.lebesgue(Grid(1, 8))
    op = assemble(HIL, None, mu, mu)
    assert cube_testing(op).value == pytest.approx(_column_testing(op), rel=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_testing_chain_and_norm_bound(seed):
    g = Grid(1, 6)
    s, w = random_doubling(g, 0.35, seed), random_doubling(g, 0.35, seed + 50)
    op = assemble(HIL, None, s, w, q_src=3, q_tgt=3)
    t = cube_testing(op).value
    assert t == pytest.approx(_column_testing(op), rel=1e-12)
    assert cube_testing(op, "kappa", 1).value == pytest.approx(t, rel=1e-12)
    assert cube_testing(op, "triple", 1).value == pytest.approx(_column_testing(op, triple=True), rel=1e-12)
    for k in (2, 3):
        tk, tr = cube_testing(op, "kappa", k).value, cube_testing(op, "triple", k).value
        assert t <= tk * (1 + 1e-12) and tk <= tr * (1 + 1e-12)
    assert t <= operator_norm(op) + 1e-9


def test_lattice_testing_dominates_dyadic(pair5):
    s, w = pair5
    op = assemble(HIL, None, s, w, q_src=2, q_tgt=2)
    for mode, k in (("plain", 1), ("kappa", 2), ("triple", 2)):
        assert cube_testing(op, mode, k, cubes="lattice").value >= cube_testing(op, mode, k).value * (1 - 1e-12)


def test_cube_profile_matches_plain_testing(pair5):
    s, w = pair5
    op = assemble(HIL, None, s, w)
    assert b_testing(op, "cube").value == pytest.approx(cube_testing(op).value, rel=1e-12)
    assert b_testing(op, "cube", delta_full=2.0 / 3.0).value == pytest.approx(cube_testing(op, "triple").value,
                                                                                 rel=1e-12)


# -------------------------------------------------------------- pivotal
def _antichains(g, q):
    """Every antichain of the subtree under q, by plain recursion."""
    yield [q]
    if q.level == g.depth:
        yield []
        return
    parts = [list(_antichains(g, c)) for c in g.children(q)]
    for combo in itertools.product(*parts):
        yield [c for part in combo for c in part]


def _score_oracle(s, w, kappa, amb, r):
    mask = np.zeros(s.grid.n_leaves)
    mask[s.grid.leaf_ids(amb)] = 1.0
    return poisson(kappa, 0.0, r, s, mask) ** 2 * w.cube_mass(r)


@pytest.mark.parametrize("kappa", [1, 2, 3])
def test_pivotal_dp_against_enumeration(kappa):
    g = Grid(1, 6)
    s, w = random_doubling(g, 0.35, kappa), random_doubling(g, 0.35, kappa + 9)
    for amb in g.cubes(3) + g.cubes(4):
        cid = g.cube_id(amb)
        memo = {r: _score_oracle(s, w, kappa, amb, r) for r in g.subtree(amb)}
        brute = max(sum(memo[r] for r in ac) for ac in _antichains(g, amb))
        assert pivotal_dp(s, w, 0.0, kappa, cid)[0] == pytest.approx(brute, rel=1e-12)


@pytest.mark.parametrize("kappa", [1, 2])
def test_pivotal_dp_against_milp(kappa):
    g = Grid(1, 6)
    s, w = random_doubling(g, 0.35, 7), random_doubling(g, 0.35, 8)
    for amb in g.cubes(0) + g.cubes(1) + g.cubes(2):
        cid = g.cube_id(amb)
        sub = g.subtree(amb)
        score = np.array([_score_oracle(s, w, kappa, amb, r) for r in sub])
        leaves = [r for r in sub if r.level == g.depth]
        rows = np.array([[1.0 if g.contains(r, lf) else 0.0 for r in sub] for lf in leaves])
        res = milp(-score, constraints=LinearConstraint(rows, 0, 1), integrality=np.ones(len(sub)),
                   bounds=(0, 1))
        val, chain = pivotal_dp(s, w, 0.0, kappa, cid)
        assert val == pytest.approx(-res.fun, rel=1e-9)
        chosen = [g.cube_list[c] for c in chain]
        assert all(not g.contains(a, b) for a in chosen for b in chosen if a != b)
        assert sum(score[sub.index(c)] for c in chosen) == pytest.approx(val, rel=1e-12)


def test_pivotal_trivial_cases(pair5):
    s, w = pair5
    g = s.grid
    assert pivotal(s, Measure(g, np.zeros(32)), 0.0, 2).value == 0.0
    leaf = g.cube_id(Cube(5, (3,)))
    _, score = pivotal_scores(s, w, 0.0, 2, leaf)
    assert pivotal_dp(s, w, 0.0, 2, leaf)[0] == score[leaf]
    res = pivotal(s, w, 0.0, 2)
    assert res.value == pytest.approx(np.sqrt(res.per_cube.max()))


# ------------------------------------------------------------------ WBP
def _partners_oracle(g, qt):
    def in_ring(small, big):
        if small.level < big.level or g.contains(big, small):
            return False
        lo, side = g.dilate(big, 3.0)
        a = g.lower(small)
        return bool(np.all(a >= lo - 1e-12) and np.all(a + g.side_of(small) <= lo + side + 1e-12))
    return sorted(g.cube_id(q) for q in g.cube_list if in_ring(q, qt) or in_ring(qt, q))


def test_wbp_partner_sets():
    for g in (Grid(1, 5), Grid(2, 3)):
        for qt in g.cube_list:
            assert wbp_partners(g, qt) == _partners_oracle(g, qt)


def test_wbp_kappa1_direct(pair5):
    s, w = pair5
    g = s.grid
    op = assemble(HIL, None, s, w)
    cols = {}
    for q in g.cube_list:
        f = np.zeros(32)
        f[g.leaf_ids(q)] = 1.0
        cols[q] = op.apply(f)
    best = 0.0
    for qt in g.cube_list:
        lt = g.leaf_ids(qt)
        for cs in _partners_oracle(g, qt):
            q = g.cube_list[cs]
            val = abs(cols[q][lt] @ w.leaf_masses[lt]) / np.sqrt(s.cube_mass(q) * w.cube_mass(qt))
            best = max(best, val)
    assert wbp(op, 1, 1).value == pytest.approx(best, rel=1e-12)


def _gauss_moments(g, s, w, trunc, q, qt, order=24):
    t, wt = np.polynomial.legendre.leggauss(order)
    h = g.leaf_side

    def nodes(cube, mu):
        xs, ws = [], []
        for k in g.leaf_ids(cube):
            xs.append(k * h + h * (t + 1) / 2)
            ws.append(wt * h / 2 * mu.densities[k])
        x = np.concatenate(xs)
        return x, np.concatenate(ws), (x - g.center(cube)[0]) / g.side_of(cube)

    y, wy, ty = nodes(q, s)
    x, wx, tx = nodes(qt, w)
    K = truncated_kernel(HIL, trunc, (x[:, None] - y[None, :])[..., None])
    P = np.stack([tx**0, tx]), np.stack([ty**0, ty])
    B = (P[0] * wx) @ K @ (P[1] * wy).T
    Ms = (P[1] * wy) @ P[1].T / s.cube_mass(q)
    Mw = (P[0] * wx) @ P[0].T / w.cube_mass(qt)
    return B, Ms, Mw


def test_wbp_kappa2_grid_search():
    g = Grid(1, 5)
    s, w = random_doubling(g, 0.3, 1), random_doubling(g, 0.3, 2)
    op = assemble(HIL, None, s, w, q_src=2, q_tgt=2)
    ang = np.linspace(0, np.pi, 4001)
    circle = np.stack([np.cos(ang), np.sin(ang)])

    def search(q, qt):
        B, Ms, Mw = _gauss_moments(g, s, w, op.trunc, q, qt)
        a = np.linalg.solve(np.linalg.cholesky(Mw).T, circle)  # averaged-unit polynomials on Q'
        b = np.linalg.solve(np.linalg.cholesky(Ms).T, circle)
        return np.abs(a.T @ B @ b).max() / np.sqrt(s.cube_mass(q) * w.cube_mass(qt))

    full = wbp(op, 2, 2)
    assert full.value == pytest.approx(search(*full.witness), rel=1e-6)
    for qt in g.cubes(2):
        for cs in wbp_partners(g, qt):
            if g.cube_list[cs].level > 3:
                continue
            assert search(g.cube_list[cs], qt) <= full.value * (1 + 1e-6)


# --------------------------------------------------------- cancellation
@pytest.mark.parametrize("annulus", ["cube", "euclidean"])
def test_shell_integral_vanishes_at_centre_for_odd_kernels(annulus):
    g = Grid(1, 7)
    mu = Measure.lebesgue(g)
    tr = TruncationSpec.default(g, 2)
    x0 = g.leaf_centers[40:90]
    for N in (g.leaf_side * 4, g.leaf_side * 16, g.leaf_side * 32):
        for eps in (g.leaf_side / 2, g.leaf_side, N / 4):
            assert np.abs(shell_integral(HIL, tr, mu, x0, eps, N, annulus)).max() <= 1e-12

    g2 = Grid(2, 4)
    mu2 = Measure.lebesgue(g2)
    tr2 = TruncationSpec.default(g2, 2)
    inner = g2.leaf_centers[np.all(np.abs(g2.leaf_centers - 0.5) < 0.2, axis=1)]
    for j in (0, 1):
        spec = KernelSpec("riesz", 0.0, 2, j)
        val = shell_integral(spec, tr2, mu2, inner, g2.leaf_side / 2, 4 * g2.leaf_side, annulus)
        assert np.abs(val).max() <= 1e-12


def test_cancellation_dual_swaps_roles(pair5):
    from twlab.constants import cancellation
    s, w = pair5
    op = assemble(HIL, None, s, w)
    rep = compute_report(op, kappa=1, which=("cancellation",))
    direct = cancellation(HIL.adjoint(), op.trunc, w, s, "cube")
    assert rep.values["A_Kstar_cube"] == direct.value
    assert all(v >= 0 for v in rep.values.values())


# --------------------------------------------------------- ratio suites
def test_ratio_suites_finite(pair5):
    s, w = pair5
    deep = random_doubling(Grid(1, 8), 0.3, 1)
    suite = poisson_inequality_suite(deep, 2, 0.0, 0.6, n_samples=200, seed=0)
    assert suite.ratios.size == 200 and suite.violations == 0 and np.isfinite(suite.constant)
    op = assemble(HIL, None, s, w, q_tgt=3)
    piv = pivotal_lemma_suite(HIL, op.trunc, s, w, 2, n_samples=200, seed=0, op=op)
    assert piv.ratios.size == 200 and piv.violations == 0 and np.isfinite(piv.constant)
    again = pivotal_lemma_suite(HIL, op.trunc, s, w, 2, n_samples=200, seed=0, op=op)
    assert np.array_equal(piv.ratios, again.ratios)


def test_report_invariants_and_serialization(pair5):
    import json
    s, w = pair5
    op = assemble(HIL, None, s, w, q_src=2, q_tgt=2)
    rep = compute_report(op, kappa=2, which=("a2", "norm", "testing", "testing_kappa", "triple", "pivotal", "wbp"))
    v = rep.values
    assert all(x >= 0 for x in v.values())
    assert v["T"] <= v["T_kappa"] * (1 + 1e-12) <= v["TR_kappa"] * (1 + 1e-12) ** 2
    assert v["T"] <= v["N"] + 1e-9 and v["T_dual"] <= v["N"] + 1e-9
    back = json.loads(rep.to_json())
    assert back["values"] == pytest.approx(v)
    assert rep.to_csv().splitlines()[0] == "constant,value,witness"
