"""Weighted Alpert multiwavelets on the dyadic tree.

Functions in the working space are piecewise polynomials of degree < kappa
on leaves, stored as an ``(n_leaves, p)`` array of coefficients in each
leaf's own normalized monomial frame.  A leaf-constant function is the
special case where only the first column is nonzero.

All moments are exact: a leaf contributes ``mass * prod_i c(beta_i)`` in its
own frame, and parent moments follow from the binomial frame shift.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np
import scipy.linalg as sla

from .grid import Grid
from .measure import Measure
from . import poly


class DegenerateCubeError(ValueError):
    pass


def shift_matrices(mset: poly.MonomialSet, lam: float, s: np.ndarray) -> np.ndarray:
    """Vectorised :func:`poly.shift_matrix` over many offsets ``s`` of shape (L, dim)."""
    B = mset.array
    e = B[:, None, :] - B[None, :, :]  # beta - gamma
    ok = np.all(e >= 0, axis=-1)
    coef = np.zeros(ok.shape)
    for i, beta in enumerate(mset.betas):
        for j, gamma in enumerate(mset.betas):
            if ok[i, j]:
                c = 1.0
                for b, g in zip(beta, gamma):
                    c *= comb(b, g) * lam**g
                coef[i, j] = c
    s = np.asarray(s, dtype=float).reshape(-1, mset.dim)
    ee = np.where(ok[..., None], e, 0)
    out = np.ones((s.shape[0],) + ok.shape)
    for d in range(mset.dim):
        out *= s[:, d][:, None, None] ** ee[None, :, :, d]
    return out * coef[None]


@dataclass
class AlpertCoefficients:
    """Wavelet coefficients per cube id plus the root coarse coefficients."""

    wavelet: dict[int, np.ndarray]
    coarse: np.ndarray

    def flat(self) -> np.ndarray:
        parts = [self.coarse] + [self.wavelet[k] for k in sorted(self.wavelet)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def to_dict(self, grid: Grid) -> dict:
        return {
            "coarse": [float(v) for v in self.coarse],
            "wavelet": {
                ",".join(str(v) for v in (grid.cube_list[k].level,) + grid.cube_list[k].index): [float(v) for v in c]
                for k, c in sorted(self.wavelet.items())
                if c.size
            },
        }


class AlpertSystem:
    """Alpert bases for every tree cube of one measure at one order kappa."""

    def __init__(self, mu: Measure, kappa: int, tol: float = 1e-10):
        if kappa < 1:
            raise ValueError("kappa must be >= 1")
        self.mu = mu
        self.grid = mu.grid
        self.kappa = kappa
        self.tol = tol
        n = self.grid.dim
        self.ms = poly.monomials(n, kappa)
        self.ms2 = poly.monomials(n, 2 * kappa - 1)
        self.p = len(self.ms)
        self.leaf_gram0 = poly.leaf_gram(self.ms, self.ms)
        self._T = poly.child_shift_matrices(n, kappa)
        self.moments = self._cube_moments()
        self._prod = poly.product_table(self.ms, self.ms, self.ms2)
        self.bases: dict[int, np.ndarray] = {}
        self.coarse: dict[int, np.ndarray] = {}
        masses = mu.cube_masses
        n_inner = int(self.grid.level_offsets[self.grid.depth])
        for cid in range(self.grid.n_cubes):
            if masses[cid] <= 0:
                continue
            self.coarse[cid] = self._coarse_basis(cid)
            if cid < n_inner:
                self.bases[cid] = self.build_basis(cid)

    # ----------------------------------------------------------- moments
    def _cube_moments(self) -> np.ndarray:
        g = self.grid
        c = poly.unit_moments(2 * self.kappa)
        unit = np.prod(c[self.ms2.array], axis=-1)
        out = np.empty((g.n_cubes, len(self.ms2)))
        lo = g.level_offsets[g.depth]
        out[lo:] = self.mu.leaf_masses[:, None] * unit[None, :]
        T2 = poly.child_shift_matrices(g.dim, 2 * self.kappa - 1)
        for level in range(g.depth - 1, -1, -1):
            a, b = g.level_offsets[level], g.level_offsets[level + 1]
            ch = g.child_ids[a:b]
            acc = np.zeros((b - a, len(self.ms2)))
            for o, T in enumerate(T2):
                acc += out[ch[:, o]] @ T.T
            out[a:b] = acc
        return out

    def gram(self, cid: int) -> np.ndarray:
        """Gram of {m_Q^beta : |beta| < kappa} in L^2(mu) on cube ``cid``."""
        return self.moments[cid][self._prod]

    def moment_gram(self, cid: int) -> np.ndarray:
        """Block-diagonal Gram of the child-supported monomial frame of a cube."""
        ch = self.grid.child_ids[cid]
        return sla.block_diag(*[self.gram(int(c)) for c in ch])

    def _coarse_basis(self, cid: int) -> np.ndarray:
        G = self.gram(cid)
        try:
            L = np.linalg.cholesky(G)
            return sla.solve_triangular(L, np.eye(self.p), lower=True).T
        except np.linalg.LinAlgError:
            w, V = np.linalg.eigh(G)
            keep = w > self.tol * w.max()
            return V[:, keep] / np.sqrt(w[keep])

    def restriction(self) -> np.ndarray:
        """Rows: child frame coefficients; columns: parent monomials."""
        return np.vstack([T.T for T in self._T])

    def build_basis(self, cid: int) -> np.ndarray:
        """Orthonormal basis of the moment-free piecewise polynomials on a cube.

        Returned as a (2^n p, d) coefficient matrix in the child frames,
        ordered by (child, beta).  Constrained Gram-Schmidt: each frame
        element is projected off the parent polynomials and the accepted
        vectors (twice), then kept if its squared residual exceeds
        tol times its squared norm.
        """
        if self.mu.cube_masses[cid] <= 0:
            raise DegenerateCubeError(f"degenerate cube {self.grid.cube_list[cid]!r}: zero mass")
        Gf = self.moment_gram(cid)
        E = self.restriction()
        GQ = E.T @ Gf @ E
        W = E @ np.linalg.solve(GQ, E.T @ Gf)  # Gf-orthogonal projector onto parent polynomials
        m = Gf.shape[0]
        accepted: list[np.ndarray] = []
        for k in range(m):
            nk = Gf[k, k]
            if nk <= 0:
                continue
            v = -W[:, k].copy()
            v[k] += 1.0
            for _ in range(2):
                v -= W @ v
                if accepted:
                    B = np.array(accepted).T
                    v -= B @ (B.T @ (Gf @ v))
            nv = float(v @ Gf @ v)
            if nv <= self.tol * nk:
                continue
            v /= np.sqrt(nv)
            if v[k] < 0:
                v = -v
            accepted.append(v)
        H = np.array(accepted).T if accepted else np.zeros((m, 0))
        # drop components on null children (they are invisible to mu)
        for c, ch in enumerate(self.grid.child_ids[cid]):
            if self.mu.cube_masses[ch] <= 0:
                H[c * self.p:(c + 1) * self.p] = 0.0
        return H

    def dimension(self, cid: int) -> int:
        b = self.bases.get(cid)
        return 0 if b is None else b.shape[1]

    # ---------------------------------------------------------- functions
    def as_leafpoly(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        N = self.grid.n_leaves
        if f.ndim == 1:
            if f.size != N:
                raise ValueError(f"shape mismatch: expected {N} leaf values, got {f.size}")
            out = np.zeros((N, self.p))
            out[:, 0] = f
            return out
        if f.shape != (N, self.p):
            raise ValueError(f"shape mismatch: expected {(N, self.p)}, got {f.shape}")
        return f

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        """L^2(mu) inner product of two leaf-polynomial functions."""
        u = self.as_leafpoly(u)
        v = self.as_leafpoly(v)
        return float(np.einsum("l,li,ij,lj->", self.mu.leaf_masses, u, self.leaf_gram0, v))

    def leaf_moments(self, f: np.ndarray) -> np.ndarray:
        """F[cid, beta] = integral over the cube of f * m_Q^beta dmu, all cubes."""
        g = self.grid
        a = self.as_leafpoly(f)
        out = np.empty((g.n_cubes, self.p))
        lo = g.level_offsets[g.depth]
        out[lo:] = self.mu.leaf_masses[:, None] * (a @ self.leaf_gram0.T)
        for level in range(g.depth - 1, -1, -1):
            s, e = g.level_offsets[level], g.level_offsets[level + 1]
            ch = g.child_ids[s:e]
            acc = np.zeros((e - s, self.p))
            for o, T in enumerate(self._T):
                acc += out[ch[:, o]] @ T.T
            out[s:e] = acc
        return out

    def transform(self, f: np.ndarray) -> AlpertCoefficients:
        F = self.leaf_moments(f)
        wav = {}
        for cid, H in self.bases.items():
            ch = self.grid.child_ids[cid]
            wav[cid] = H.T @ F[ch].ravel()
        root = 0
        coarse = self.coarse[root].T @ F[root] if root in self.coarse else np.zeros(0)
        return AlpertCoefficients(wav, coarse)

    def reconstruct(self, coeffs: AlpertCoefficients) -> np.ndarray:
        g = self.grid
        P = np.zeros((g.n_cubes, self.p))
        if 0 in self.coarse:
            P[0] = self.coarse[0] @ coeffs.coarse
        for level in range(g.depth):
            s, e = g.level_offsets[level], g.level_offsets[level + 1]
            for cid in range(s, e):
                ch = g.child_ids[cid]
                add = None
                if cid in self.bases and self.bases[cid].shape[1]:
                    add = (self.bases[cid] @ coeffs.wavelet[cid]).reshape(len(ch), self.p)
                for o, T in enumerate(self._T):
                    P[ch[o]] = T.T @ P[cid] + (add[o] if add is not None else 0.0)
        lo = g.level_offsets[g.depth]
        return P[lo:].copy()

    # ------------------------------------------------- projections as functions
    def push_down(self, cid: int, coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Express a polynomial on a cube (cube frame) in the frames of its leaves.

        Returns (leaf ids, (L, p) coefficients).
        """
        g = self.grid
        q = g.cube_list[cid]
        leaves = g.leaf_ids(q)
        lam = 2.0 ** -(g.depth - q.level)
        s = (g.leaf_centers[leaves] - g.center(q)) / g.side_of(q)
        T = shift_matrices(self.ms, lam, s)
        return leaves, np.einsum("lbg,b->lg", T, coeffs)

    def child_polys(self, cid: int, coef: np.ndarray) -> np.ndarray:
        """(2^n, p) child-frame polynomials of the wavelet combination ``coef``."""
        H = self.bases[cid]
        return (H @ coef).reshape(-1, self.p)

    def delta(self, cid: int, coef: np.ndarray) -> np.ndarray:
        """Leaf-polynomial array of sum_a coef[a] h_Q^a (zero outside the cube)."""
        out = np.zeros((self.grid.n_leaves, self.p))
        if cid not in self.bases or not self.bases[cid].shape[1]:
            return out
        polys = self.child_polys(cid, coef)
        for o, ch in enumerate(self.grid.child_ids[cid]):
            leaves, vals = self.push_down(int(ch), polys[o])
            out[leaves] = vals
        return out

    def expectation_coeffs(self, cid: int, F_row: np.ndarray) -> np.ndarray:
        """Cube-frame coefficients of E_{Q;kappa} f given the cube's f-moments."""
        C = self.coarse.get(cid)
        if C is None:
            return np.zeros(self.p)
        return C @ (C.T @ F_row)

    def expectation(self, cid: int, F_row: np.ndarray) -> np.ndarray:
        out = np.zeros((self.grid.n_leaves, self.p))
        leaves, vals = self.push_down(cid, self.expectation_coeffs(cid, F_row))
        out[leaves] = vals
        return out

    def all_deltas(self, f: np.ndarray, coeffs: AlpertCoefficients | None = None) -> np.ndarray:
        """(n_cubes, n_leaves, p) array of every projection Delta_Q f."""
        if coeffs is None:
            coeffs = self.transform(f)
        g = self.grid
        out = np.zeros((g.n_cubes, g.n_leaves, self.p))
        for cid in self.bases:
            out[cid] = self.delta(cid, coeffs.wavelet[cid])
        return out

    # ------------------------------------------------------------ checks
    def moment_residual(self, cid: int) -> float:
        """max |integral h m_Q^beta dmu| over basis functions and |beta| < kappa."""
        H = self.bases.get(cid)
        if H is None or not H.shape[1]:
            return 0.0
        Gf = self.moment_gram(cid)
        E = self.restriction()
        return float(np.abs(E.T @ Gf @ H).max())

    def orthonormality_residual(self, cid: int) -> float:
        H = self.bases.get(cid)
        if H is None or not H.shape[1]:
            return 0.0
        Gf = self.moment_gram(cid)
        return float(np.abs(H.T @ Gf @ H - np.eye(H.shape[1])).max())


def sup_bound_check(system: AlpertSystem, samples: list[np.ndarray], n_grid: int = 33) -> tuple[float, tuple]:
    """Max over cubes and samples of sup|E_Q f| / sqrt(avg_Q |f|^2 dmu).

    Sup is exact in 1D (endpoints and critical points of the polynomial on
    the cube) and sampled on an ``n_grid``^2 lattice in 2D.
    """
    g = system.grid
    ms = system.ms
    best, arg = 0.0, None
    if g.dim == 1:
        pts = None
    else:
        t = np.linspace(-0.5, 0.5, n_grid)
        pts = np.stack(np.meshgrid(t, t, indexing="ij"), axis=-1).reshape(-1, 2)
    masses = system.mu.cube_masses
    for si, f in enumerate(samples):
        fp = system.as_leafpoly(f)
        F = system.leaf_moments(fp)
        sq = _square_masses(system, fp)
        for cid in system.coarse:
            if masses[cid] <= 0 or sq[cid] <= 0:
                continue
            a = system.expectation_coeffs(cid, F[cid])
            if g.dim == 1:
                cand = [-0.5, 0.5]
                if system.kappa > 2:
                    d = np.polynomial.polynomial.polyder(a)
                    r = np.polynomial.polynomial.polyroots(d) if np.any(d) else []
                    cand += [float(x.real) for x in r if abs(x.imag) < 1e-12 and -0.5 <= x.real <= 0.5]
                vals = np.polynomial.polynomial.polyval(np.array(cand), a)
            else:
                vals = poly.evaluate(a, ms, pts)
            ratio = float(np.abs(vals).max() / np.sqrt(sq[cid] / masses[cid]))
            if ratio > best:
                best, arg = ratio, (si, g.cube_list[cid])
    return best, arg


def _square_masses(system: AlpertSystem, fp: np.ndarray) -> np.ndarray:
    g = system.grid
    leaf = system.mu.leaf_masses * np.einsum("li,ij,lj->l", fp, system.leaf_gram0, fp)
    out = np.empty(g.n_cubes)
    for cid, q in enumerate(g.cube_list):
        out[cid] = leaf[g.leaf_ids(q)].sum()
    return out


def identity_residuals(system: AlpertSystem, f: np.ndarray, g: np.ndarray) -> dict[str, float]:
    """Worst residual of each structural identity of the system, for test functions f and g.

    orthonormality, moments: max over cubes of the basis checks.
    cross_orthogonality: max |<Delta_I f, Delta_J g>| over I != J, relative to the norms.
    parseval, round_trip: relative errors of ||f||^2 and of reconstruct(transform(f)).
    telescoping: E_child f = (E_parent f + Delta_parent f) on the child, coefficientwise,
    relative to the size of E_child f.
    """
    grid = system.grid
    fp, gp = system.as_leafpoly(f), system.as_leafpoly(g)
    out = {
        "orthonormality": max((system.orthonormality_residual(c) for c in system.bases), default=0.0),
        "moments": max((system.moment_residual(c) for c in system.bases), default=0.0),
    }
    cf, cg = system.transform(fp), system.transform(gp)
    Df = system.all_deltas(fp, cf).reshape(grid.n_cubes, -1)
    Dg = system.all_deltas(gp, cg).reshape(grid.n_cubes, -1)
    def weighted(D):
        D = D.reshape(grid.n_cubes, grid.n_leaves, system.p) @ system.leaf_gram0.T
        return (D * system.mu.leaf_masses[None, :, None]).reshape(grid.n_cubes, -1)

    Dg_w = weighted(Dg)
    nf = np.sqrt(np.maximum(np.einsum("ci,ci->c", Df, weighted(Df)), 0))
    ng = np.sqrt(np.maximum(np.einsum("ci,ci->c", Dg, Dg_w), 0))
    # disjoint cubes have disjoint supports, so only nested pairs can fail
    Df3 = Df.reshape(grid.n_cubes, grid.n_leaves, system.p)
    Dg3 = Dg_w.reshape(grid.n_cubes, grid.n_leaves, system.p)
    cross = 0.0
    for J in range(1, grid.n_cubes):
        leaves = grid.leaf_ids(grid.cube_list[J])
        anc = [grid.cube_id(q) for q in grid.ancestors(grid.cube_list[J])]
        ab = np.einsum("alp,lp->a", Df3[anc][:, leaves], Dg3[J, leaves])  # Delta_I f against Delta_J g, I above J
        ba = np.einsum("lp,alp->a", Df3[J, leaves], Dg3[anc][:, leaves])
        cross = max(cross, float(np.abs(ab).max()), float(np.abs(ba).max()))
    scale = max(float(nf.max(initial=0) * ng.max(initial=0)), 1e-300)
    out["cross_orthogonality"] = cross / scale
    norm2 = system.inner(fp, fp)
    energy = float(cf.coarse @ cf.coarse) + sum(float(c @ c) for c in cf.wavelet.values())
    out["parseval"] = abs(energy - norm2) / norm2 if norm2 > 0 else abs(energy)
    back = system.reconstruct(cf)
    live = system.mu.leaf_masses > 0
    den = np.abs(fp[live]).max(initial=0)
    out["round_trip"] = float(np.abs(back[live] - fp[live]).max(initial=0)) / den if den > 0 else 0.0
    F = system.leaf_moments(fp)
    worst = 0.0
    for cid, H in system.bases.items():
        parent = system.expectation_coeffs(cid, F[cid])
        add = (H @ cf.wavelet[cid]).reshape(-1, system.p) if H.shape[1] else np.zeros((1 << grid.dim, system.p))
        for o, T in enumerate(system._T):
            ch = int(grid.child_ids[cid][o])
            if ch not in system.coarse:
                continue
            direct = system.expectation_coeffs(ch, F[ch])
            ref = np.abs(direct).max() + np.abs(parent).max()
            if ref > 0:
                worst = max(worst, float(np.abs(T.T @ parent + add[o] - direct).max() / ref))
    out["telescoping"] = worst
    return out
