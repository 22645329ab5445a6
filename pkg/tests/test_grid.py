from fractions import Fraction
from itertools import product

import numpy as np
import pytest
from hypothesis import given, strategies as st

from twlab.grid import Cube, GoodnessConfig, Grid, GridError


def test_children_1d_bisect():
    g = Grid(1, 3)
    kids = g.children(g.root)
    assert [(g.lower(c)[0], g.side_of(c)) for c in kids] == [(0.0, 0.5), (0.5, 0.5)]


def test_children_2d_lex_quadrants():
    g = Grid(2, 2)
    corners = [tuple(g.lower(c)) for c in g.children(g.root)]
    assert corners == [(0.0, 0.0), (0.0, 0.5), (0.5, 0.0), (0.5, 0.5)]


def test_leaf_has_no_children():
    g = Grid(1, 2)
    with pytest.raises(GridError, match="no children"):
        g.children(Cube(2, (1,)))


@pytest.mark.parametrize("dim,depth", [(1, 5), (2, 3)])
def test_children_partition_parent_volume(dim, depth):
    g = Grid(dim, depth, side=3.0)
    for q in g.all_cubes():
        if not g.is_leaf(q):
            assert sum(g.volume(c) for c in g.children(q)) == pytest.approx(g.volume(q), rel=0, abs=1e-15)
    assert g.n_leaves == 2 ** (dim * depth)
    assert g.leaf_side == 3.0 * 2.0**-depth


def test_cube_ids_roundtrip():
    g = Grid(2, 3)
    for cid, q in enumerate(g.cube_list):
        assert g.cube_id(q) == cid
        assert g.cube_from_id(cid) == q


def test_nesting_or_disjoint():
    g = Grid(1, 4)
    for a, b in product(g.all_cubes(), repeat=2):
        la, lb = g.lower(a)[0], g.lower(b)[0]
        ha, hb = la + g.side_of(a), lb + g.side_of(b)
        overlap = min(ha, hb) - max(la, lb) > 0
        assert overlap == (g.contains(a, b) or g.contains(b, a))


# exact oracle for deep embedding, independent of the floating-point implementation
def _deep_exact(J, I, r, eps):
    if J.level < I.level or (J.index[0] >> (J.level - I.level)) != I.index[0]:
        return False
    if J.level - I.level < r:
        return False
    lj, li = Fraction(1, 2**J.level), Fraction(1, 2**I.level)
    a = I.index[0] * li
    b = J.index[0] * lj
    dist = min(max(Fraction(0), b - c, c - (b + lj)) for c in (a, a + li / 2, a + li))
    return float(dist) >= 2 * float(lj) ** eps * float(li) ** (1 - eps)


def test_deep_embedding_examples():
    g = Grid(1, 4)
    root = g.root
    assert not g.is_deeply_embedded(Cube(3, (0,)), root, 2, 0.5)  # touches 0
    assert not g.is_deeply_embedded(root, root, 1, 0.5)
    # J=[3/8,1/2): its right end touches the child boundary 1/2, so the distance is 0
    J = Cube(3, (3,))
    assert g.boundary_distance(J, root) == 0.0
    assert g.is_deeply_embedded(J, root, 2, 0.25) is False


def test_deep_embedding_matches_exact_oracle():
    g = Grid(1, 7)
    for eps in (0.25, 0.5, 0.6):
        for r in (1, 2, 3):
            for I in g.cube_list[:15]:
                for J in g.subtree(I):
                    assert g.is_deeply_embedded(J, I, r, eps) == _deep_exact(J, I, r, eps)


def _good_exact(J, r, eps):
    for lvl in range(J.level):
        L = Cube(lvl, (J.index[0] >> (J.level - lvl),))
        if J.level - lvl <= r - 1:
            continue
        if not _deep_exact(J, L, r, eps):
            return False
    return True


def test_goodness_labeling_depth5_bruteforce():
    g = Grid(1, 5)
    cfg = GoodnessConfig(r=2, eps=0.5, tau=3, rho=6)
    labels = g.good_mask(cfg)
    oracle = np.array([_good_exact(q, 2, 0.5) for q in g.cube_list])
    assert labels.shape == (63,)
    np.testing.assert_array_equal(labels, oracle)
    assert labels[0] and labels[1] and labels[2]  # root and depth-1 cubes


@pytest.mark.parametrize("depth", [4, 5, 6])
def test_goodness_monotone_in_eps(depth):
    g = Grid(1, depth)
    epss = [0.2, 0.35, 0.5, 0.65, 0.8]
    masks = [g.good_mask(GoodnessConfig(r=1, eps=e, tau=2, rho=4)) for e in epss]
    for lo, hi in zip(masks, masks[1:]):
        assert np.all(hi[lo])


def test_goodness_config_invariants():
    GoodnessConfig(1, 0.4, 2, 4).validate(kappa=1, dim=1)
    with pytest.raises(GridError):
        GoodnessConfig(2, 0.4, 2, 5).validate()  # tau must exceed r
    with pytest.raises(GridError):
        GoodnessConfig(1, 0.4, 2, 3).validate()  # rho must exceed r + tau
    with pytest.raises(GridError):
        GoodnessConfig(1, 0.5, 2, 4).validate(kappa=1, dim=1)  # eps < kappa/(n+kappa)


@given(st.integers(1, 2), st.integers(1, 4), st.data())
def test_ancestors_nearest_first(dim, depth, data):
    g = Grid(dim, depth)
    cid = data.draw(st.integers(0, g.n_cubes - 1))
    q = g.cube_list[cid]
    anc = g.ancestors(q)
    assert [a.level for a in anc] == list(range(q.level - 1, -1, -1))
    assert all(g.contains(a, q) for a in anc)


@given(st.integers(0, 5), st.integers(0, 31))
def test_dilate_concentric(level, k):
    g = Grid(1, 5)
    q = Cube(level, (k % (1 << level),))
    lo, s = g.dilate(q, 3.0)
    assert s == pytest.approx(3 * g.side_of(q))
    assert lo[0] + s / 2 == pytest.approx(g.center(q)[0])
