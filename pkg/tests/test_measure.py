import numpy as np
import pytest
from hypothesis import given, strategies as st

from twlab.grid import Cube, Grid
from twlab.measure import Measure, MeasureError, doubling_stats, random_doubling


def test_mass_examples():
    g = Grid(1, 4)
    assert Measure.lebesgue(g).mass([0.0], 0.25) == pytest.approx(0.25)
    dens = np.where(np.arange(16) < 8, 2.0, 0.0)
    assert Measure(g, dens).mass([0.0], 1.0) == pytest.approx(1.0)


def test_mass_off_lattice_rejected():
    g = Grid(1, 4)
    with pytest.raises(MeasureError, match="off-lattice"):
        Measure.lebesgue(g).mass([0.01], 0.25)


def test_dilate_mass_clipped_flag():
    g = Grid(1, 4)
    mu = Measure.lebesgue(g)
    val, clipped = mu.dilate_mass(Cube(1, (0,)), 3.0, return_clipped=True)
    assert clipped and val == pytest.approx(1.0)


def _naive_box(mu, lo_units, side_units):
    g = mu.grid
    m = g.leaves_per_side
    lm = mu.leaf_masses.reshape((m,) * g.dim)
    sl = tuple(slice(max(0, a), min(m, a + side_units)) for a in lo_units)
    return lm[sl].sum()


@pytest.mark.parametrize("dim,depth", [(1, 7), (2, 4)])
def test_box_mass_matches_naive_summation(dim, depth):
    g = Grid(dim, depth)
    mu = random_doubling(g, 0.2, 3)
    rng = np.random.default_rng(0)
    m = g.leaves_per_side
    for _ in range(100):
        s = int(rng.integers(1, m + 1))
        lo = rng.integers(-s + 1, m, size=dim)
        got = mu.box_mass_units(lo[None, :].astype(float), np.array([float(s)]))[0]
        assert got == pytest.approx(_naive_box(mu, lo, s), rel=1e-12, abs=1e-15)


def test_cube_masses_additive():
    g = Grid(2, 4)
    mu = random_doubling(g, 0.1, 9)
    cm = mu.cube_masses
    for cid in range(g.level_offsets[g.depth]):
        assert cm[cid] == pytest.approx(cm[g.child_ids[cid]].sum(), rel=1e-13)
    for q in g.cubes(2):
        assert mu.cube_mass(q) == pytest.approx(mu.leaf_masses[g.leaf_ids(q)].sum(), rel=1e-13)


@given(st.integers(0, 2**16), st.floats(0.05, 0.5))
def test_random_doubling_fractions_and_determinism(seed, beta):
    g = Grid(1, 6)
    a = random_doubling(g, beta, seed)
    b = random_doubling(g, beta, seed)
    assert np.array_equal(a.densities, b.densities)
    assert a.total == pytest.approx(1.0)
    cm = a.cube_masses
    for cid in range(g.level_offsets[g.depth]):
        frac = cm[g.child_ids[cid]] / cm[cid]
        assert frac.min() >= beta - 1e-12


def test_random_doubling_degenerate_is_lebesgue():
    g = Grid(2, 3)
    mu = random_doubling(g, 0.25, 4)
    np.testing.assert_allclose(mu.densities, 1.0, rtol=1e-12)


def test_random_doubling_rejects_large_beta():
    with pytest.raises(MeasureError):
        random_doubling(Grid(1, 3), 0.6, 0)


def test_lebesgue_doubling_constant():
    assert doubling_stats(Measure.lebesgue(Grid(1, 6))).c_doub == pytest.approx(2.0)
    assert doubling_stats(Measure.lebesgue(Grid(2, 4))).c_doub == pytest.approx(4.0)


def _doubling_bruteforce(mu):
    g = mu.grid
    m = g.leaves_per_side
    lm = mu.leaf_masses
    best = 0.0
    for s in range(1, m // 2 + 1):
        for a in range(m):
            # 2Q = [a - s/2, a + 3s/2) inside [0, m)
            if a - s / 2 < 0 or a + 1.5 * s > m:
                continue
            q = lm[a:a + s].sum()
            lo, hi = a - s / 2, a + 1.5 * s
            q2 = 0.0
            for leaf in range(m):
                q2 += lm[leaf] * max(0.0, min(hi, leaf + 1) - max(lo, leaf))
            best = max(best, q2 / q if q > 0 else (np.inf if q2 > 0 else 0.0))
    return best


def test_doubling_constant_exhaustive_oracle():
    mu = random_doubling(Grid(1, 8), 0.3, 7)
    st_ = doubling_stats(mu, n_rev_samples=50)
    assert st_.c_doub == pytest.approx(_doubling_bruteforce(mu), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_doubling_monotone_in_beta_on_matched_seeds(seed):
    g = Grid(1, 7)
    vals = [doubling_stats(random_doubling(g, b, seed), n_rev_samples=5).c_doub for b in (0.2, 0.3, 0.4, 0.5)]
    assert all(np.isfinite(vals))
    assert all(b <= a * (1 + 1e-12) for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(2.0)


def test_reverse_doubling_exponent_bounds_samples():
    mu = random_doubling(Grid(1, 7), 0.3, 2)
    theta = doubling_stats(mu, n_rev_samples=100, seed=1).theta_rev
    assert theta > 0
    g = mu.grid
    rng = np.random.default_rng(1)
    cubes = np.arange(g.n_cubes)
    cubes = cubes[g.levels[cubes] < g.depth]
    for cid in np.sort(rng.choice(cubes, size=min(100, cubes.size), replace=False)):
        q = g.cube_list[cid]
        for j in range(1, g.depth - q.level + 1):
            assert mu.dilate_mass(q, 2.0**-j) <= (2.0**-j) ** theta * mu.cube_masses[cid] * (1 + 1e-9)


def test_measure_file_roundtrip(tmp_path):
    mu = random_doubling(Grid(2, 3), 0.1, 1)
    p = tmp_path / "m.json"
    mu.save(p)
    back = Measure.load(p)
    assert back.grid == mu.grid and np.array_equal(back.densities, mu.densities)
    p.write_text('{"dimension": 1, "depth": 2, "densities": [1, 2, 3]}')
    with pytest.raises(MeasureError):
        Measure.load(p)
    p.write_text('{"dimension": 1, "depth": 2, "densities": [1, 2, -3, 1]}')
    with pytest.raises(MeasureError):
        Measure.load(p)
