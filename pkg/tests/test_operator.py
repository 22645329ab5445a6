import numpy as np
import pytest
import scipy.integrate as si

from twlab.grid import Grid
from twlab.kernel import KernelSpec, TruncationSpec, truncated_kernel
from twlab.measure import Measure, random_doubling
from twlab.operator import (DiscreteOperator, SingularQuadratureError, assemble, operator_norm, power_iteration,
                            read_matrix, write_matrix)

HIL = KernelSpec("hilbert")


def test_zero_kernel_and_zero_sigma():
    g = Grid(1, 5)
    mu = Measure.lebesgue(g)
    assert not np.any(assemble(KernelSpec("zero"), None, mu, mu).A)
    assert not np.any(assemble(HIL, None, Measure(g, np.zeros(g.n_leaves)), mu).A)
    op = assemble(KernelSpec("zero"), None, mu, mu)
    assert operator_norm(op) == 0.0 and not np.any(op.adjoint().A)


def test_singular_quadrature_refused():
    g = Grid(1, 5)
    mu = Measure.lebesgue(g)
    with pytest.raises(SingularQuadratureError, match="singular quadrature"):
        assemble(HIL, TruncationSpec(g.leaf_diameter, 2.0), mu, mu)


def test_entries_against_adaptive_quadrature():
    g = Grid(1, 6)
    mu = Measure.lebesgue(g)
    tr = TruncationSpec.default(g, 2)
    op = assemble(HIL, tr, mu, mu)
    h = g.leaf_side
    k = lambda x, y: float(truncated_kernel(HIL, tr, np.array([[x - y]]))[0])
    worst = 0.0
    for a, b in [(10, 5), (10, 6), (10, 7), (10, 8), (0, 63), (30, 33), (40, 10)]:
        val = si.dblquad(lambda y, x: k(x, y), a * h, (a + 1) * h, b * h, (b + 1) * h,
                         epsabs=1e-13, epsrel=1e-11)[0] / h**2
        worst = max(worst, abs(op.A[a, b] - val) / max(abs(val), 1e-300))
    assert worst <= 1e-6


def test_moment_matrix_against_quadrature():
    g = Grid(1, 4)
    s, w = random_doubling(g, 0.3, 1), random_doubling(g, 0.3, 2)
    tr = TruncationSpec.default(g, 2)
    op = assemble(HIL, tr, s, w, q_src=2, q_tgt=2)
    h = g.leaf_side
    N = g.n_leaves
    G = op.G.reshape(N, 2, N, 2)
    k = lambda x, y: float(truncated_kernel(HIL, tr, np.array([[x - y]]))[0])
    for a, b in [(0, 5), (3, 9), (12, 1)]:
        ca, cb = (a + 0.5) * h, (b + 0.5) * h
        for be in (0, 1):
            for ga in (0, 1):
                f = lambda y, x: k(x, y) * ((x - ca) / h) ** be * ((y - cb) / h) ** ga
                val = si.dblquad(f, a * h, (a + 1) * h, b * h, (b + 1) * h, epsabs=1e-14, epsrel=1e-11)[0]
                val *= s.densities[b] * w.densities[a]
                assert G[a, be, b, ga] == pytest.approx(val, rel=1e-7, abs=1e-12)


def test_identity_operator_norm_one():
    g = Grid(1, 5)
    mu = random_doubling(g, 0.3, 0)
    base = assemble(KernelSpec("zero"), None, mu, mu)
    op = DiscreteOperator(base.kernel, base.trunc, mu, mu, base.stencil, np.diag(1.0 / mu.leaf_masses))
    np.testing.assert_allclose(op.apply(np.arange(32.0)), np.arange(32.0))
    assert operator_norm(op) == pytest.approx(1.0, rel=1e-12)


def test_power_iteration_matches_svd_depth8():
    g = Grid(1, 8)
    mu = Measure.lebesgue(g)
    op = assemble(HIL, None, mu, mu)
    assert operator_norm(op, "power") == pytest.approx(operator_norm(op, "svd"), rel=1e-9)
    M = np.random.default_rng(0).standard_normal((30, 20))
    assert power_iteration(M) == pytest.approx(np.linalg.svd(M, compute_uv=False)[0], rel=1e-9)


def test_duality_and_norm_duality(doubling_pair_1d):
    s, w = doubling_pair_1d
    op = assemble(HIL, None, s, w)
    adj = op.adjoint()
    rng = np.random.default_rng(0)
    f, g = rng.standard_normal((2, s.grid.n_leaves))
    assert op.pairing(f, g) == pytest.approx(adj.pairing(g, f), rel=1e-12)
    assert operator_norm(op) == pytest.approx(operator_norm(adj), rel=1e-9)
    direct = assemble(HIL.adjoint(), None, w, s)
    np.testing.assert_allclose(direct.A, adj.A, rtol=1e-10, atol=1e-12 * np.abs(op.A).max())


def test_hilbert_adjoint_is_negative_on_equal_measures():
    g = Grid(1, 6)
    mu = random_doubling(g, 0.3, 3)
    op = assemble(HIL, None, mu, mu)
    np.testing.assert_allclose(op.adjoint().A, -op.A, atol=1e-13 * np.abs(op.A).max())
    f = np.random.default_rng(1).standard_normal(g.n_leaves)
    assert op.pairing(f, f) == pytest.approx(0.0, abs=1e-12 * np.abs(f).sum() ** 2)


def test_2d_riesz_adjoint_and_finiteness():
    g = Grid(2, 3)
    mu = random_doubling(g, 0.15, 5)
    op = assemble(KernelSpec("riesz", 0.0, 2, 1), None, mu, mu)
    assert np.all(np.isfinite(op.A))
    np.testing.assert_allclose(op.adjoint().A, -op.A, atol=1e-12 * np.abs(op.A).max())


def test_matrix_dump_roundtrip(tmp_path):
    A = np.random.default_rng(0).standard_normal((7, 5))
    p = tmp_path / "a.bin"
    write_matrix(p, A)
    raw = p.read_bytes()
    assert int.from_bytes(raw[:8], "little") == 7 and int.from_bytes(raw[8:16], "little") == 5
    assert np.array_equal(read_matrix(p), A)


def test_truncation_stability_recorded():
    g = Grid(1, 7)
    s, w = random_doubling(g, 0.3, 1), random_doubling(g, 0.3, 2)
    norms = [operator_norm(assemble(HIL, TruncationSpec(c * g.leaf_diameter, 2 * g.root_diameter), s, w))
             for c in (2, 3, 4, 8)]
    assert all(np.isfinite(norms))
    assert max(norms) / min(norms) < 3.0
