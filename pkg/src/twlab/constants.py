"""Extremal constants: Muckenhoupt, Poisson, testing, pivotal, WBP, cancellation, ball testing.

Testing-type constants use leaf averages of T_sigma(...) on the omega side
(the Galerkin projection), so each of them is bounded by the operator norm
of the same discretization.  Every supremum returns its witness; ties go
to the first candidate in enumeration order (tree order for dyadic cubes,
side then row-major corner for lattice cubes).
"""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .alpert import AlpertSystem, shift_matrices
from .grid import Cube, Grid
from .kernel import KernelSpec, TruncationSpec, truncated_kernel
from .measure import Measure
from .operator import DiscreteOperator, assemble, operator_norm
from . import poly


@dataclass
class Sup:
    """A supremum with the candidate that attains it."""

    value: float
    witness: object = None


# --------------------------------------------------------------------- A2
def a2(sigma: Measure, omega: Measure, alpha: float = 0.0, cubes: str = "lattice") -> Sup:
    """sup_Q |Q|_sigma |Q|_omega / |Q|^{2(1 - alpha/n)}; witness is (lower corner, side)."""
    g = sigma.grid
    if omega.grid != g:
        raise ValueError("grids differ")
    n, h, m = g.dim, g.leaf_side, g.leaves_per_side
    expo = 2.0 * (1.0 - alpha / n)
    if cubes == "dyadic":
        vols = (g.side / 2.0 ** g.levels) ** n
        vals = sigma.cube_masses * omega.cube_masses / vols**expo
        k = int(np.argmax(vals))
        q = g.cube_list[k]
        return Sup(float(vals[k]), (tuple(g.lower(q)), g.side_of(q)))
    if cubes != "lattice":
        raise ValueError(f"unknown cube family {cubes!r}")
    best = Sup(0.0)
    for s in range(1, m + 1):
        r = np.arange(0, m - s + 1)
        lows = np.stack(np.meshgrid(*([r] * n), indexing="ij"), axis=-1).reshape(-1, n).astype(float)
        side = np.full(len(lows), float(s))
        vals = sigma.box_mass_units(lows, side) * omega.box_mass_units(lows, side) / ((s * h) ** n) ** expo
        k = int(np.argmax(vals))
        if vals[k] > best.value:
            best = Sup(float(vals[k]), (tuple(np.asarray(g.origin) + lows[k] * h), s * h))
    return best


# ---------------------------------------------------------------- Poisson
def poisson_leaf_weights(grid: Grid, center, ell: float, m: int, alpha: float) -> np.ndarray:
    """Lebesgue integral over each leaf of ell^m / (ell + |y - c|)^{n+m-alpha}.

    Closed form in 1D; in 2D each leaf is split into 2x2 cells with a
    4-point Gauss rule per axis.
    """
    if m < 1:
        raise ValueError("Poisson order m must be >= 1")
    center = np.atleast_1d(np.asarray(center, dtype=float))
    if grid.dim == 1:
        p = 1.0 + m - alpha
        edges = grid.origin[0] + np.arange(grid.leaves_per_side + 1) * grid.leaf_side
        d = edges - center[0]
        anti = np.sign(d) * (ell ** (1 - p) - (ell + np.abs(d)) ** (1 - p)) / (p - 1)
        return ell**m * np.diff(anti)
    t, w = _gauss_cells(4, 2)
    n = grid.dim
    mesh = np.stack(np.meshgrid(*([t] * n), indexing="ij"), axis=-1).reshape(-1, n)
    wm = np.prod(np.stack(np.meshgrid(*([w] * n), indexing="ij"), axis=-1).reshape(-1, n), axis=-1)
    h = grid.leaf_side
    y = grid.leaf_centers[:, None, :] + h * mesh[None]
    r = np.sqrt(((y - center) ** 2).sum(-1))
    return (ell**m / (ell + r) ** (n + m - alpha)) @ wm * h**n


@lru_cache(maxsize=8)
def _gauss_cells(order: int, sub: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss rule on [-1/2, 1/2] with ``sub`` equal cells."""
    t, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(-0.5, 0.5, sub + 1)
    pts = [0.5 * (b - a) * t + 0.5 * (a + b) for a, b in zip(edges[:-1], edges[1:])]
    return np.concatenate(pts), np.tile(0.5 * w / sub, sub)


@lru_cache(maxsize=16)
def poisson_matrix(grid: Grid, m: int, alpha: float) -> np.ndarray:
    """W[cube id, leaf]; P_m(Q, mu) = W[Q] @ density."""
    W = np.empty((grid.n_cubes, grid.n_leaves))
    for cid, q in enumerate(grid.cube_list):
        W[cid] = poisson_leaf_weights(grid, grid.center(q), grid.side_of(q), m, alpha)
    W.setflags(write=False)
    return W


def poisson(m: int, alpha: float, cube: Cube, mu: Measure, mask: np.ndarray | None = None) -> float:
    """P_m^alpha(Q, mu), optionally for mu restricted by a 0/1 leaf mask."""
    g = mu.grid
    dens = mu.densities if mask is None else mu.densities * mask
    return float(poisson_leaf_weights(g, g.center(cube), g.side_of(cube), m, alpha) @ dens)


# ------------------------------------------------------- polynomial columns
def level_membership(grid: Grid, level: int, dilation: int = 1) -> np.ndarray:
    """(cubes at level, leaves) 0/1 matrix of leaves inside Q (or 3Q when dilation=3)."""
    shift = grid.depth - level
    anc = grid.leaf_multi_index >> shift  # (N, n)
    idx = np.indices((1 << level,) * grid.dim).reshape(grid.dim, -1).T  # (nL, n)
    reach = (dilation - 1) // 2
    diff = np.abs(idx[:, None, :] - anc[None, :, :])
    return np.all(diff <= reach, axis=-1).astype(float)


def level_columns(grid: Grid, ms: poly.MonomialSet, level: int) -> np.ndarray:
    """Leaf-frame coefficients of 1_Q m_Q^beta for all cubes Q at a level.

    Shape (N * p, nL * p): rows (leaf, gamma), columns (cube, beta).
    """
    p = len(ms)
    shift = grid.depth - level
    N = grid.n_leaves
    anc = grid.leaf_multi_index >> shift
    nL = 1 << (level * grid.dim)
    owner = np.ravel_multi_index(tuple(anc.T), (1 << level,) * grid.dim)
    side = grid.side / (1 << level)
    centers = np.asarray(grid.origin) + (anc + 0.5) * side
    T = shift_matrices(ms, grid.leaf_side / side, (grid.leaf_centers - centers) / side)  # (N, beta, gamma)
    out = np.zeros((N, p, nL, p))
    out[np.arange(N), :, owner, :] = np.swapaxes(T, 1, 2)
    return out.reshape(N * p, nL * p)


def averaged_rows(op: DiscreteOperator, q: int) -> np.ndarray:
    """B with leaf averages of T_sigma(c) on omega leaves equal to B @ (c * sigma leaf mass).

    Columns are (source leaf, gamma) for |gamma| < q.
    """
    if op.q_src < q:
        raise ValueError(f"operator assembled with source degree bound {op.q_src}, need {q}")
    g = op.grid
    ms = poly.monomials(g.dim, q)
    cols = [op.stencil.cols.index[b] for b in ms.betas]
    S = op.stencil.data[..., 0, :][..., cols][op.offset_index()]  # (N, N, p)
    S = S / g.leaf_side ** (2 * g.dim)
    S = S * (op.omega.densities > 0)[:, None, None] * (op.sigma.densities > 0)[None, :, None]
    return S.reshape(g.n_leaves, -1)


# --------------------------------------------------------------- testing
def cube_testing(op: DiscreteOperator, mode: str = "plain", kappa: int = 1, cubes: str = "dyadic") -> Sup:
    """Plain, kappa and triple-kappa cube testing; witness is (cube, beta)."""
    if mode not in ("plain", "kappa", "triple"):
        raise ValueError(f"unknown testing mode {mode!r}")
    q = 1 if mode == "plain" else kappa
    if cubes == "lattice":
        return _lattice_testing(op, mode, q)
    g = op.grid
    ms = poly.monomials(g.dim, q)
    p = len(ms)
    B = averaged_rows(op, q)
    sm = np.repeat(op.sigma.leaf_masses, p)
    wm = op.omega.leaf_masses
    best = Sup(0.0)
    for level in range(g.depth + 1):
        X = level_columns(g, ms, level) * sm[:, None]
        V = (B @ X).reshape(g.n_leaves, -1, p)  # (leaf, cube, beta)
        R = level_membership(g, level, 3 if mode == "triple" else 1)
        num = np.einsum("qa,a,aqb->qb", R, wm, V * V)
        lo = g.level_offsets[level]
        sq = op.sigma.cube_masses[lo:lo + R.shape[0]]
        ok = sq > 0
        ratio = np.zeros_like(num)
        ratio[ok] = np.sqrt(num[ok] / sq[ok, None])
        k = int(np.argmax(ratio))
        if ratio.flat[k] > best.value:
            qi, bi = divmod(k, p)
            best = Sup(float(ratio.flat[k]), (g.cube_list[lo + qi], ms.betas[bi]))
    return best


def _lattice_cubes(grid: Grid):
    m, h = grid.leaves_per_side, grid.leaf_side
    for s in range(1, m + 1):
        for lo in itertools.product(range(0, m - s + 1), repeat=grid.dim):
            yield np.asarray(grid.origin) + np.asarray(lo, dtype=float) * h, s * h


def _lattice_testing(op: DiscreteOperator, mode: str, q: int) -> Sup:
    g = op.grid
    ms = poly.monomials(g.dim, q)
    B = averaged_rows(op, q)
    sm, wm = op.sigma.leaf_masses, op.omega.leaf_masses
    best = Sup(0.0)
    for lower, side in _lattice_cubes(g):
        sq = op.sigma.mass(lower, side)
        if sq <= 0:
            continue
        idx = np.nonzero(np.all((g.leaf_centers > lower) & (g.leaf_centers < lower + side), axis=1))[0]
        T = shift_matrices(ms, g.leaf_side / side, (g.leaf_centers[idx] - lower - side / 2) / side)
        C = np.zeros((g.n_leaves, len(ms), len(ms)))
        C[idx] = np.swapaxes(T, 1, 2) * sm[idx, None, None]
        V = B @ C.reshape(-1, len(ms))
        if mode == "triple":
            region = g.overlap_fractions(lower - side, lower + 2 * side)
        else:
            region = g.overlap_fractions(lower, lower + side)
        ratio = np.sqrt((region * wm) @ (V * V) / sq)
        k = int(np.argmax(ratio))
        if ratio[k] > best.value:
            best = Sup(float(ratio[k]), ((tuple(lower), side), ms.betas[k]))
    return best


# --------------------------------------------------------------- pivotal
@dataclass
class PivotalResult:
    value: float  # V_2, the square root of the maximized ratio
    ambient: Cube | None
    antichain: list[Cube]
    per_cube: np.ndarray  # best(Q) / |Q|_sigma for every cube id


def _subtree_levels(grid: Grid, cid: int) -> list[np.ndarray]:
    """Cube ids of the subtree below ``cid``, one row-major array per level."""
    q = grid.cube_list[cid]
    out = []
    for L in range(q.level, grid.depth + 1):
        s = L - q.level
        m = 1 << L
        flat = np.zeros(1, dtype=np.int64)
        for k in q.index:
            flat = (flat[:, None] * m + np.arange(k << s, (k + 1) << s)[None, :]).ravel()
        out.append(grid.level_offsets[L] + flat)
    return out


def pivotal_scores(sigma: Measure, omega: Measure, alpha: float, kappa: int, cid: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-level subtree ids and a full-length array of P(R, 1_Q sigma)^2 |R|_omega."""
    g = sigma.grid
    W = poisson_matrix(g, kappa, float(alpha))
    levels = _subtree_levels(g, cid)
    leaves = g.leaf_ids(g.cube_list[cid])
    ids = np.concatenate(levels)
    score = np.zeros(g.n_cubes)
    P = W[np.ix_(ids, leaves)] @ sigma.densities[leaves]
    score[ids] = P * P * omega.cube_masses[ids]
    return levels, score


def pivotal_dp(sigma: Measure, omega: Measure, alpha: float, kappa: int, cid: int) -> tuple[float, list[int]]:
    """Exact maximum over antichains below one ambient cube, with the maximizing antichain."""
    g = sigma.grid
    levels, score = pivotal_scores(sigma, omega, alpha, kappa, cid)
    best = score.copy()
    take = np.ones(g.n_cubes, dtype=bool)
    for ids in reversed(levels[:-1]):
        below = best[g.child_ids[ids]].sum(axis=1)
        take[ids] = score[ids] >= below
        best[ids] = np.maximum(score[ids], below)
    chain, stack = [], [cid]
    while stack:
        i = stack.pop()
        if take[i]:
            if score[i] > 0:
                chain.append(i)
        else:
            stack.extend(int(c) for c in g.child_ids[i])
    return float(best[cid]), sorted(chain)


def pivotal(sigma: Measure, omega: Measure, alpha: float, kappa: int) -> PivotalResult:
    """V_2^{alpha,kappa} = sqrt(max_Q best(Q) / |Q|_sigma) over ambient dyadic cubes Q."""
    g = sigma.grid
    per = np.zeros(g.n_cubes)
    for cid in range(g.n_cubes):
        sq = sigma.cube_masses[cid]
        if sq > 0:
            per[cid] = pivotal_dp(sigma, omega, alpha, kappa, cid)[0] / sq
    k = int(np.argmax(per))
    if per[k] <= 0:
        return PivotalResult(0.0, None, [], per)
    _, chain = pivotal_dp(sigma, omega, alpha, kappa, k)
    return PivotalResult(float(np.sqrt(per[k])), g.cube_list[k], [g.cube_list[c] for c in chain], per)


# ------------------------------------------------------------------- WBP
def wbp_partners(grid: Grid, qt: Cube) -> list[int]:
    """Ids of dyadic Q with Q in 3Q' minus Q' or Q' in 3Q minus Q, where Q' = ``qt``."""
    out = set()

    def neighbours(c: Cube):
        m = 1 << c.level
        for off in itertools.product((-1, 0, 1), repeat=grid.dim):
            nb = tuple(k + o for k, o in zip(c.index, off))
            if any(off) and all(0 <= v < m for v in nb):
                yield Cube(c.level, nb)

    for nb in neighbours(qt):
        out.update(grid.cube_id(c) for c in grid.subtree(nb))
    for anc in grid.ancestors(qt):
        out.update(grid.cube_id(nb) for nb in neighbours(anc))
    return sorted(out)


def wbp(op: DiscreteOperator, kappa1: int = 1, kappa2: int = 1) -> Sup:
    """Weak boundedness constant; polynomial unit balls use the averaged L^2 norm on each cube."""
    g = op.grid
    if op.q_src < kappa1 or op.q_tgt < kappa2:
        raise ValueError("operator degrees too small for the requested WBP orders")
    ms1, ms2 = poly.monomials(g.dim, kappa1), poly.monomials(g.dim, kappa2)
    p1, p2 = len(ms1), len(ms2)
    N = g.n_leaves
    rsel = [op.stencil.rows.index[b] for b in ms2.betas]
    csel = [op.stencil.cols.index[b] for b in ms1.betas]
    G = op.G.reshape(N, len(op.stencil.rows), N, len(op.stencil.cols))[:, rsel][:, :, :, csel].reshape(N * p2, N * p1)
    Xs = np.hstack([level_columns(g, ms1, L) for L in range(g.depth + 1)])
    Xt = np.hstack([level_columns(g, ms2, L) for L in range(g.depth + 1)])
    Y = G @ Xs  # omega-side leaf moments of T(1_Q m_Q^beta sigma) for every cube Q
    frames_s = _coarse_frames(op.sigma, kappa1)
    frames_t = _coarse_frames(op.omega, kappa2)
    best = Sup(0.0)
    for ct, qt in enumerate(g.cube_list):
        if op.omega.cube_masses[ct] <= 0:
            continue
        leaves = g.leaf_ids(qt)
        rows = (leaves[:, None] * p2 + np.arange(p2)[None, :]).ravel()
        Ct = Xt[rows, ct * p2:(ct + 1) * p2]
        Z = (Ct.T @ Y[rows]).reshape(p2, g.n_cubes, p1)
        for cs in wbp_partners(g, qt):
            if op.sigma.cube_masses[cs] <= 0:
                continue
            blk = frames_t[ct].T @ Z[:, cs, :] @ frames_s[cs]
            scale = np.sqrt(op.sigma.cube_masses[cs] * op.omega.cube_masses[ct])
            val = float(np.linalg.norm(blk, 2) / scale) if blk.size else 0.0
            if val > best.value:
                best = Sup(val, (g.cube_list[cs], qt))
    return best


def _coarse_frames(mu: Measure, kappa: int) -> dict[int, np.ndarray]:
    """Cube-frame bases orthonormal for the averaged L^2(mu) norm."""
    sysm = AlpertSystem(mu, kappa)
    return {cid: C * np.sqrt(mu.cube_masses[cid]) for cid, C in sysm.coarse.items()}


# ---------------------------------------------------------- cancellation
@dataclass
class QuadNodes:
    x: np.ndarray  # (M, n) positions
    w: np.ndarray  # (M,) Lebesgue weights
    leaf: np.ndarray  # (M,) owning leaf


def leaf_nodes(grid: Grid, order: int | None = None) -> QuadNodes:
    """Tensor Gauss nodes per leaf, symmetric about each leaf center."""
    if order is None:
        order = 4 if grid.dim == 1 else 2
    t, w = np.polynomial.legendre.leggauss(order)
    t = 0.25 * (t - t[::-1])  # exact reflection symmetry, mapped to [-1/2, 1/2]
    w = 0.25 * (w + w[::-1])
    n = grid.dim
    mesh = np.stack(np.meshgrid(*([t] * n), indexing="ij"), axis=-1).reshape(-1, n)
    wm = np.prod(np.stack(np.meshgrid(*([w] * n), indexing="ij"), axis=-1).reshape(-1, n), axis=-1)
    h = grid.leaf_side
    x = grid.leaf_centers[:, None, :] + h * mesh[None]
    M = mesh.shape[0]
    return QuadNodes(x.reshape(-1, n), np.tile(wm * h**n, grid.n_leaves), np.repeat(np.arange(grid.n_leaves), M))


def annulus_norm(u: np.ndarray, annulus: str) -> np.ndarray:
    if annulus == "cube":
        return np.abs(u).max(axis=-1)
    if annulus == "euclidean":
        return np.sqrt((u * u).sum(axis=-1))
    raise ValueError(f"unknown annulus {annulus!r}")


def shell_integral(spec: KernelSpec, trunc: TruncationSpec, sigma: Measure, x, eps: float, N: float,
                   annulus: str = "cube", order: int | None = None) -> np.ndarray:
    """int over eps < ||x - y|| < N of K(x, y) dsigma(y), at each row of ``x``."""
    nodes = leaf_nodes(sigma.grid, order)
    ws = nodes.w * sigma.densities[nodes.leaf]
    x = np.atleast_2d(np.asarray(x, dtype=float))
    diff = x[:, None, :] - nodes.x[None, :, :]
    d = annulus_norm(diff, annulus)
    return (truncated_kernel(spec, trunc, diff) * ((d > eps) & (d < N))) @ ws


@dataclass
class CancellationResult(Sup):
    clipped: bool = False  # the witness's denominator cube or ball leaves the root


def cancellation(spec: KernelSpec, trunc: TruncationSpec, sigma: Measure, omega: Measure, annulus: str = "cube",
                 order: int | None = None) -> CancellationResult:
    """Sup over leaf centers x0 and dyadic eps < N of the normalized shell-integral energy."""
    g = sigma.grid
    nodes = leaf_nodes(g, order)
    ws = nodes.w * sigma.densities[nodes.leaf]
    ww = nodes.w * omega.densities[nodes.leaf]
    diff = nodes.x[:, None, :] - nodes.x[None, :, :]
    D = annulus_norm(diff, annulus)
    K = truncated_kernel(spec, trunc, diff)
    del diff
    x0 = g.leaf_centers
    Dx0 = annulus_norm(x0[:, None, :] - nodes.x[None, :, :], annulus)
    h = g.leaf_side
    lo_root, hi_root = np.asarray(g.origin), np.asarray(g.origin) + g.side
    best = CancellationResult(0.0)
    for j in range(g.depth + 1):
        Nr = h * 2.0**j
        ball = (Dx0 < Nr).astype(float)
        if annulus == "cube":
            den = sigma.box_mass_units((x0 - Nr - lo_root) / h, np.full(len(x0), 2 * Nr / h))
        else:
            den = ball @ ws
        clipped = np.any((x0 - Nr < lo_root) | (x0 + Nr > hi_root), axis=1)
        for i in range(1, g.depth + 3):
            eps = Nr / 2.0**i
            if eps < h / 4:
                break
            S = (K * ((D > eps) & (D < Nr))) @ ws
            num = ball @ (S * S * ww)
            ratio = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
            k = int(np.argmax(ratio))
            if ratio[k] > best.value:
                best = CancellationResult(float(ratio[k]), (eps, Nr, tuple(x0[k])), bool(clipped[k]))
    return best


# ------------------------------------------------------------- B-testing
def profile_leaf_averages(grid: Grid, center, side: float, profile: str, sub: int = 16) -> np.ndarray:
    """Leaf averages of b_Q = |Q| B_{l(Q)}(x - c_Q) for the cube or inscribed-ball profile."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    if profile == "cube" or (profile == "ball" and grid.dim == 1):
        return grid.overlap_fractions(center - side / 2, center + side / 2)
    if profile != "ball":
        raise ValueError(f"unknown profile {profile!r}")
    rad = side / 2
    height = side**grid.dim / (np.pi * rad**2)
    cand = np.nonzero(np.all(np.abs(grid.leaf_centers - center) < rad + grid.leaf_side, axis=1))[0]
    t = ((np.arange(sub) + 0.5) / sub - 0.5) * grid.leaf_side
    mesh = np.stack(np.meshgrid(t, t, indexing="ij"), axis=-1).reshape(-1, 2)
    out = np.zeros(grid.n_leaves)
    for i in cand:
        out[i] = np.mean((((grid.leaf_centers[i] + mesh) - center) ** 2).sum(-1) < rad**2)
    return out * height


def b_testing(op: DiscreteOperator, profile: str = "ball", delta_full: float | None = None) -> Sup:
    """Profile testing over dyadic cubes; region Q, or (2/delta) Q clipped to the root."""
    g = op.grid
    sm, wm = op.sigma.leaf_masses, op.omega.leaf_masses
    best = Sup(0.0)
    for q in g.cube_list:
        c, side = g.center(q), g.side_of(q)
        b = profile_leaf_averages(g, c, side, profile)
        den = float((b * b) @ sm)
        if den <= 0:
            continue
        r = side / 2 if delta_full is None else side / delta_full
        region = g.overlap_fractions(c - r, c + r)
        v = op.apply(b)
        val = float(np.sqrt(((region * wm) @ (v * v)) / den))
        if val > best.value:
            best = Sup(val, q)
    return best


# ---------------------------------------------------------- ratio suites
@dataclass
class RatioSuite:
    name: str
    ratios: np.ndarray
    configs: list = field(default_factory=list)

    @property
    def constant(self) -> float:
        return float(self.ratios.max()) if self.ratios.size else 0.0

    @property
    def violations(self) -> int:
        """Samples that are non-finite or exceed the recorded constant."""
        return int(np.sum(~np.isfinite(self.ratios)) + np.sum(self.ratios > self.constant))

    def summary(self) -> dict:
        r = self.ratios
        return {"name": self.name, "n": int(r.size), "constant": self.constant,
                "median": float(np.median(r)) if r.size else 0.0, "violations": self.violations}


def poisson_inequality_suite(sigma: Measure, m: int, alpha: float, eps: float, n_samples: int = 1000,
                             seed: int = 0) -> RatioSuite:
    """Ratios P_m(J, sigma 1_{K\\I}) / [(l(J)/l(I))^{m - eps(n+m-alpha)} P_m(I, sigma 1_{K\\I})].

    Triples J in I strictly inside K are drawn uniformly by level and
    position; J must sit at distance > 2 sqrt(n) l(J)^eps l(I)^(1-eps)
    from the boundary of I.
    """
    g = sigma.grid
    n = g.dim
    W = poisson_matrix(g, m, float(alpha))
    rng = np.random.default_rng(seed)
    ratios, configs = [], []
    attempts = 0
    while len(ratios) < n_samples and attempts < 200 * n_samples:
        attempts += 1
        lk = int(rng.integers(0, g.depth - 1))
        li = int(rng.integers(lk + 1, g.depth))
        lj = int(rng.integers(li + 1, g.depth + 1))
        K = Cube(lk, tuple(int(v) for v in rng.integers(0, 1 << lk, n)))
        I = Cube(li, tuple((k << (li - lk)) + int(v) for k, v in zip(K.index, rng.integers(0, 1 << (li - lk), n))))
        J = Cube(lj, tuple((k << (lj - li)) + int(v) for k, v in zip(I.index, rng.integers(0, 1 << (lj - li), n))))
        sJ, sI = g.side_of(J), g.side_of(I)
        a, b = g.lower(I), g.lower(J)
        dist = float(np.min(np.minimum(b - a, a + sI - (b + sJ))))
        if dist <= 2 * np.sqrt(n) * sJ**eps * sI ** (1 - eps):
            continue
        mask = np.zeros(g.n_leaves)
        mask[g.leaf_ids(K)] = 1.0
        mask[g.leaf_ids(I)] = 0.0
        dens = sigma.densities * mask
        pi = W[g.cube_id(I)] @ dens
        if pi <= 0:
            continue
        pj = W[g.cube_id(J)] @ dens
        ratios.append(pj / ((sJ / sI) ** (m - eps * (n + m - alpha)) * pi))
        configs.append((J, I, K))
    return RatioSuite("poisson_inequality", np.asarray(ratios), configs)


def poly_sup(coeffs: np.ndarray, ms: poly.MonomialSet, n_grid: int = 65) -> float:
    """sup over the unit frame cube of |polynomial| (exact in 1D, sampled in 2D)."""
    if ms.dim == 1:
        c = np.zeros(ms.degree)
        c[[b[0] for b in ms.betas]] = coeffs
        cand = [-0.5, 0.5]
        d = np.polynomial.polynomial.polyder(c)
        if d.size and np.any(d):
            cand += [float(r.real) for r in np.atleast_1d(np.polynomial.polynomial.polyroots(d))
                     if abs(r.imag) < 1e-12 and -0.5 <= r.real <= 0.5]
        return float(np.abs(np.polynomial.polynomial.polyval(np.array(cand), c)).max())
    t = np.linspace(-0.5, 0.5, n_grid)
    pts = np.stack(np.meshgrid(t, t, indexing="ij"), axis=-1).reshape(-1, 2)
    return float(np.abs(poly.evaluate(coeffs, ms, pts)).max())


def pivotal_lemma_suite(spec: KernelSpec, trunc: TruncationSpec, sigma: Measure, omega: Measure, kappa: int,
                        gamma: float = 3.0, n_samples: int = 1000, seed: int = 0,
                        op: DiscreteOperator | None = None) -> RatioSuite:
    """Ratios |<R T(phi nu), Psi_J>_omega| / [P_kappa(J, nu) sqrt|J|_omega ||Psi_J||].

    nu = |phi| sigma with phi leaf-constant, |phi| <= 1, vanishing on gamma J;
    R has degree < kappa on J with sup_J |R| = 1; Psi_J is a random element
    of the omega-Alpert range at J.
    """
    g = sigma.grid
    q2 = 2 * kappa - 1
    if op is None or op.q_tgt < q2:
        op = assemble(spec, trunc, sigma, omega, q_tgt=q2, q_src=1)
    W = poisson_matrix(g, kappa, float(spec.alpha))
    sys_w = AlpertSystem(omega, kappa)
    ms, ms2 = sys_w.ms, poly.monomials(g.dim, q2)
    rsel = [op.stencil.rows.index[b] for b in ms2.betas]
    N, pr = g.n_leaves, len(op.stencil.rows)
    G0 = op.G.reshape(N, pr, N, len(op.stencil.cols))[..., 0][:, rsel, :]  # (target leaf, beta, source leaf)
    cands = [cid for cid, H in sys_w.bases.items() if H.shape[1] > 0]
    rng = np.random.default_rng(seed)
    ratios, configs = [], []
    attempts = 0
    while len(ratios) < n_samples and attempts < 50 * n_samples and cands:
        attempts += 1
        cid = cands[int(rng.integers(len(cands)))]
        J = g.cube_list[cid]
        psi = sys_w.delta(cid, rng.standard_normal(sys_w.dimension(cid)))
        norm_psi = np.sqrt(sys_w.inner(psi, psi))
        if norm_psi <= 0:
            continue
        rc = rng.standard_normal(len(ms))
        rc /= poly_sup(rc, ms)
        leaves, rleaf = sys_w.push_down(cid, rc)
        prod = np.zeros((N, len(ms2)))
        prod[leaves] = poly.multiply(rleaf, ms, psi[leaves], ms, ms2)
        lo, side = g.dilate(J, gamma)
        outside = g.overlap_fractions(lo, lo + side) == 0
        phi = rng.uniform(-1.0, 1.0, N) * outside
        if not np.any(phi * sigma.densities):
            continue
        pj = W[cid] @ (np.abs(phi) * sigma.densities)
        val = np.einsum("ab,abs,s->", prod, G0, phi)
        ratios.append(abs(val) / (pj * np.sqrt(omega.cube_masses[cid]) * norm_psi))
        configs.append(J)
    return RatioSuite("pivotal_lemma", np.asarray(ratios), configs)


# ----------------------------------------------------------------- report
@dataclass
class ConstantsReport:
    values: dict[str, float] = field(default_factory=dict)
    witnesses: dict[str, object] = field(default_factory=dict)
    meta: dict[str, object] = field(default_factory=dict)

    def set(self, name: str, res: Sup | float, witness=None) -> None:
        if isinstance(res, Sup):
            res, witness = res.value, res.witness
        self.values[name] = float(res)
        self.witnesses[name] = witness

    def to_json_dict(self) -> dict:
        return {"values": self.values, "witnesses": jsonable(self.witnesses), "meta": jsonable(self.meta)}

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["constant", "value", "witness"])
        for k in sorted(self.values):
            w.writerow([k, repr(self.values[k]), json.dumps(jsonable(self.witnesses.get(k)), sort_keys=True)])
        return buf.getvalue()


def jsonable(v):
    """Convert cubes, numpy values and tuples into plain JSON types."""
    if isinstance(v, Cube):
        return {"level": v.level, "index": list(v.index)}
    if isinstance(v, dict):
        return {str(k): jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return jsonable(v.tolist())
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if np.isfinite(v) else str(v)
    return v


ALL_CONSTANTS = ("a2", "norm", "testing", "testing_kappa", "triple", "pivotal", "wbp", "cancellation", "b_testing")


def compute_report(op: DiscreteOperator, kappa: int = 2, which=ALL_CONSTANTS, delta_full: float = 0.5) -> ConstantsReport:
    """All requested constants for one operator; duals come from the adjoint operator."""
    alpha = op.kernel.alpha
    rep = ConstantsReport()
    rep.meta.update({"kernel": op.kernel.to_dict(), "truncation": op.trunc.to_dict(), "kappa": kappa,
                     "grid": op.grid.to_dict()})
    adj = op.adjoint()
    if "a2" in which:
        rep.set("A2", a2(op.sigma, op.omega, alpha))
        rep.set("A2_dyadic", a2(op.sigma, op.omega, alpha, cubes="dyadic"))
    if "norm" in which:
        rep.set("N", operator_norm(op))
    if "testing" in which:
        rep.set("T", cube_testing(op, "plain"))
        rep.set("T_dual", cube_testing(adj, "plain"))
    if "testing_kappa" in which and op.q_src >= kappa:
        rep.set("T_kappa", cube_testing(op, "kappa", kappa))
        if adj.q_src >= kappa:
            rep.set("T_kappa_dual", cube_testing(adj, "kappa", kappa))
    if "triple" in which and op.q_src >= kappa:
        rep.set("TR_kappa", cube_testing(op, "triple", kappa))
        if adj.q_src >= kappa:
            rep.set("TR_kappa_dual", cube_testing(adj, "triple", kappa))
    if "pivotal" in which:
        p = pivotal(op.sigma, op.omega, alpha, kappa)
        rep.set("V2", p.value, {"ambient": p.ambient, "antichain": p.antichain})
        p = pivotal(op.omega, op.sigma, alpha, kappa)
        rep.set("V2_dual", p.value, {"ambient": p.ambient, "antichain": p.antichain})
    if "wbp" in which and op.q_src >= kappa and op.q_tgt >= kappa:
        rep.set("WBP", wbp(op, kappa, kappa))
    if "cancellation" in which:
        for ann in ("cube", "euclidean"):
            c = cancellation(op.kernel, op.trunc, op.sigma, op.omega, ann)
            rep.set(f"A_K_{ann}", c.value, {"eps_N_x0": c.witness, "clipped": c.clipped})
            c = cancellation(adj.kernel, op.trunc, op.omega, op.sigma, ann)
            rep.set(f"A_Kstar_{ann}", c.value, {"eps_N_x0": c.witness, "clipped": c.clipped})
    if "b_testing" in which:
        rep.set("T_ball", b_testing(op, "ball"))
        rep.set("T_ball_full", b_testing(op, "ball", delta_full=delta_full))
    return rep
