"""Leaf-resolution realization of the truncated operator T_sigma.

Every kernel is a convolution kernel on a uniform grid, so all leaf-pair
integrals depend only on the index offset k = a - b.  For each offset we
compute the moment stencil

    S[k][beta, gamma] = int_a int_b K_trunc(x - y) m_a^beta(x) m_b^gamma(y) dx dy

(Lebesgue).  Substituting v = s - t in the leaf frames turns it into one
n-dimensional integral of K_trunc(h (k + v)) against an exact piecewise
polynomial weight, integrated by Gauss-Legendre on pieces split at every
point where the integrand is not smooth.

The leaf matrix A (acting on leaf averages) and the moment-Galerkin matrix
G (acting on leaf polynomials) are both read off the same stencil, so
every identity between forms holds to round-off.
"""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from functools import cached_property
from math import comb

import numpy as np

from .grid import Grid
from .kernel import KernelSpec, TruncationSpec, truncated_kernel
from .measure import Measure
from . import poly


class SingularQuadratureError(ValueError):
    pass


class NonConvergenceError(RuntimeError):
    def __init__(self, msg: str, residual: float):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


def _pair_weight(b: int, c: int, v: np.ndarray) -> np.ndarray:
    """w(v) = int over s in [-1/2,1/2] with s - v in [-1/2,1/2] of s^b (s - v)^c ds."""
    lo = np.maximum(-0.5, v - 0.5)
    hi = np.minimum(0.5, v + 0.5)
    out = np.zeros_like(v)
    for j in range(c + 1):
        e = b + j + 1
        out += comb(c, j) * (-v) ** (c - j) * (hi**e - lo**e) / e
    return out


def _weights_table(rows: poly.MonomialSet, cols: poly.MonomialSet, v: np.ndarray) -> np.ndarray:
    """W[..., i, j] = prod_d w_{beta_d gamma_d}(v_d) for nodes v of shape (M, dim)."""
    n = rows.dim
    maxb, maxc = rows.degree, cols.degree
    w1 = np.empty((n, maxb, maxc, v.shape[0]))
    for d in range(n):
        for b in range(maxb):
            for c in range(maxc):
                w1[d, b, c] = _pair_weight(b, c, v[:, d])
    W = np.ones((v.shape[0], len(rows), len(cols)))
    for i, beta in enumerate(rows.betas):
        for j, gamma in enumerate(cols.betas):
            for d in range(n):
                W[:, i, j] *= w1[d, beta[d], gamma[d]]
    return W


def _gauss(order: int, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    t, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (b - a) * t + 0.5 * (a + b), 0.5 * (b - a) * w


@dataclass
class Stencil:
    """Moment stencil indexed by offset + (m - 1) along each axis."""

    data: np.ndarray  # shape (2m-1,)*dim + (p_rows, p_cols)
    rows: poly.MonomialSet
    cols: poly.MonomialSet
    h: float

    def transposed(self) -> "Stencil":
        n = self.rows.dim
        flipped = self.data[(slice(None, None, -1),) * n]
        return Stencil(np.swapaxes(flipped, -1, -2).copy(), self.cols, self.rows, self.h)


def moment_stencil(spec: KernelSpec, trunc: TruncationSpec, grid: Grid, q_rows: int = 1, q_cols: int = 1,
                   order: int = 16, near_sub: int = 8) -> Stencil:
    n = grid.dim
    m = grid.leaves_per_side
    h = grid.leaf_side
    rows = poly.monomials(n, q_rows)
    cols = poly.monomials(n, q_cols)
    shape = (2 * m - 1,) * n + (len(rows), len(cols))
    data = np.zeros(shape)
    if spec.family == "zero":
        return Stencil(data, rows, cols, h)
    offs = np.indices((2 * m - 1,) * n).reshape(n, -1).T - (m - 1)  # (K, n) integer offsets
    flat = data.reshape(-1, len(rows), len(cols))
    radii = np.array([trunc.delta, 2 * trunc.delta, trunc.R, 2 * trunc.R]) / h
    if n == 1:
        _stencil_1d(spec, trunc, offs[:, 0], h, rows, cols, order, radii, flat)
    else:
        _stencil_nd(spec, trunc, offs, h, rows, cols, order, near_sub, radii, flat)
    flat *= h ** (2 * n)
    return Stencil(data, rows, cols, h)


def _stencil_1d(spec, trunc, offs, h, rows, cols, order, radii, out):
    t, w = np.polynomial.legendre.leggauss(order)
    # far offsets: only the kink at v = 0 inside (-1, 1)
    pieces = [(-1.0, 0.0), (0.0, 1.0)]
    near = np.zeros(offs.size, dtype=bool)
    for r in radii:
        for sgn in (1.0, -1.0):
            v = sgn * r - offs
            near |= (v > -1.0) & (v < 1.0)
    near |= np.abs(offs) <= 1
    far = ~near
    for a, b in pieces:
        v = 0.5 * (b - a) * t + 0.5 * (a + b)
        wt = 0.5 * (b - a) * w
        W = _weights_table(rows, cols, v[:, None])
        u = h * (offs[far][:, None] + v[None, :])
        F = truncated_kernel(spec, trunc, u[..., None])
        out[far] += np.einsum("km,mij->kij", F * wt[None, :], W)
    for idx in np.nonzero(near)[0]:
        k = offs[idx]
        cuts = {-1.0, 0.0, 1.0, float(-k)}
        for r in radii:
            cuts.update((r - k, -r - k))
        cuts = sorted(c for c in cuts if -1.0 <= c <= 1.0)
        acc = 0.0
        for a, b in zip(cuts[:-1], cuts[1:]):
            if b - a < 1e-15:
                continue
            v, wt = _gauss(order, a, b)
            W = _weights_table(rows, cols, v[:, None])
            F = truncated_kernel(spec, trunc, (h * (k + v))[:, None])
            acc = acc + np.einsum("m,mij->ij", F * wt, W)
        out[idx] = acc


def _stencil_nd(spec, trunc, offs, h, rows, cols, order, near_sub, radii, out):
    n = offs.shape[1]
    orthants = list(itertools.product(((-1.0, 0.0), (0.0, 1.0)), repeat=n))
    near = np.zeros(offs.shape[0], dtype=bool)
    for orth in orthants:
        lo = offs + np.array([o[0] for o in orth])
        hi = offs + np.array([o[1] for o in orth])
        amin = np.where((lo < 0) & (hi > 0), 0.0, np.minimum(np.abs(lo), np.abs(hi)))
        amax = np.maximum(np.abs(lo), np.abs(hi))
        rmin = np.sqrt((amin**2).sum(axis=1))
        rmax = np.sqrt((amax**2).sum(axis=1))
        for r0, r1 in ((radii[0], radii[1]), (radii[2], radii[3])):
            near |= (rmax > r0) & (rmin < r1)

    def nodes_for(box, sub):
        per_dim = []
        for a, b in box:
            edges = np.linspace(a, b, sub + 1)
            vs, ws = [], []
            for e0, e1 in zip(edges[:-1], edges[1:]):
                v, w = _gauss(order, e0, e1)
                vs.append(v)
                ws.append(w)
            per_dim.append((np.concatenate(vs), np.concatenate(ws)))
        grids = np.meshgrid(*[p[0] for p in per_dim], indexing="ij")
        wgrids = np.meshgrid(*[p[1] for p in per_dim], indexing="ij")
        v = np.stack([g.ravel() for g in grids], axis=-1)
        w = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
        return v, w

    far = ~near
    for orth in orthants:
        v, wt = nodes_for(orth, 1)
        W = _weights_table(rows, cols, v)
        fo = offs[far]
        for start in range(0, fo.shape[0], 512):
            chunk = fo[start:start + 512]
            u = h * (chunk[:, None, :] + v[None, :, :])
            F = truncated_kernel(spec, trunc, u)
            out[np.nonzero(far)[0][start:start + 512]] += np.einsum("km,mij->kij", F * wt[None, :], W)
        vs, ws = nodes_for(orth, near_sub)
        Ws = _weights_table(rows, cols, vs)
        for idx in np.nonzero(near)[0]:
            u = h * (offs[idx][None, :] + vs)
            F = truncated_kernel(spec, trunc, u)
            out[idx] += np.einsum("m,mij->ij", F * ws, Ws)


@dataclass
class DiscreteOperator:
    kernel: KernelSpec
    trunc: TruncationSpec
    sigma: Measure
    omega: Measure
    stencil: Stencil
    A: np.ndarray = field(repr=False)

    @property
    def grid(self) -> Grid:
        return self.sigma.grid

    @property
    def q_tgt(self) -> int:
        return self.stencil.rows.degree

    @property
    def q_src(self) -> int:
        return self.stencil.cols.degree

    def offset_index(self) -> tuple[np.ndarray, ...]:
        g = self.grid
        mi = g.leaf_multi_index
        m = g.leaves_per_side
        return tuple((mi[:, None, d] - mi[None, :, d]) + (m - 1) for d in range(g.dim))

    @cached_property
    def G(self) -> np.ndarray:
        """Moment-Galerkin matrix, rows (omega leaf, beta), cols (sigma leaf, gamma)."""
        g = self.grid
        N = g.n_leaves
        S = self.stencil.data[self.offset_index()]  # (N, N, pr, pc)
        rho_w = self.omega.densities
        rho_s = self.sigma.densities
        S = S * rho_w[:, None, None, None] * rho_s[None, :, None, None]
        pr, pc = S.shape[-2:]
        return np.ascontiguousarray(S.transpose(0, 2, 1, 3).reshape(N * pr, N * pc))

    def apply(self, f: np.ndarray) -> np.ndarray:
        """Leaf averages (in omega) of T_sigma f for leaf-constant f."""
        return self.A @ (np.asarray(f, dtype=float) * self.sigma.leaf_masses)

    def pairing(self, f: np.ndarray, g: np.ndarray) -> float:
        return float(np.asarray(g) @ (self.omega.leaf_masses * self.apply(f)))

    def weighted_matrix(self) -> np.ndarray:
        return np.sqrt(self.omega.leaf_masses)[:, None] * self.A * np.sqrt(self.sigma.leaf_masses)[None, :]

    def adjoint(self) -> "DiscreteOperator":
        op = DiscreteOperator(self.kernel.adjoint(), self.trunc, self.omega, self.sigma,
                              self.stencil.transposed(), self.A.T.copy())
        if "G" in self.__dict__:
            op.__dict__["G"] = self.G.T.copy()
        return op

    def dump(self, path) -> None:
        write_matrix(path, self.A)


def assemble(kernel: KernelSpec, trunc: TruncationSpec | None, sigma: Measure, omega: Measure,
             grid: Grid | None = None, quad_order: int = 16, q_src: int = 1, q_tgt: int = 1,
             near_sub: int = 8) -> DiscreteOperator:
    grid = grid or sigma.grid
    if sigma.grid != grid or omega.grid != grid:
        raise ValueError("measures must live on the operator grid")
    if kernel.dim != grid.dim:
        raise ValueError("kernel dimension differs from grid dimension")
    if trunc is None:
        trunc = TruncationSpec.default(grid)
    if trunc.delta < 2.0 * grid.leaf_diameter * (1 - 1e-12):
        raise SingularQuadratureError(
            f"singular quadrature: delta_t={trunc.delta:.4g} < 2 * leaf diameter = {2 * grid.leaf_diameter:.4g}")
    st = moment_stencil(kernel, trunc, grid, q_tgt, q_src, order=quad_order, near_sub=near_sub)
    h = grid.leaf_side
    tmp = DiscreteOperator(kernel, trunc, sigma, omega, st, np.zeros((0, 0)))
    A = st.data[..., 0, 0][tmp.offset_index()] / h ** (2 * grid.dim)
    A = A * (omega.densities > 0)[:, None] * (sigma.densities > 0)[None, :]
    tmp.A = A
    return tmp


def power_iteration(M: np.ndarray, tol: float = 1e-10, max_iter: int = 200000) -> float:
    """Largest singular value by power iteration on M^T M with an eigen-residual stop."""
    n = M.shape[1]
    if not np.any(M):
        return 0.0
    x = np.ones(n) / np.sqrt(n) + 1e-3 * np.cos(np.arange(n))
    x /= np.linalg.norm(x)
    res = np.inf
    for _ in range(max_iter):
        y = M.T @ (M @ x)
        lam = float(x @ y)
        res = float(np.linalg.norm(y - lam * x)) / max(lam, 1e-300)
        if res <= tol:
            return float(np.sqrt(max(lam, 0.0)))
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        x = y / ny
    raise NonConvergenceError("power iteration did not converge", res)


def operator_norm(op: DiscreteOperator, method: str = "auto", tol: float = 1e-10) -> float:
    M = op.weighted_matrix()
    if method == "auto":
        method = "svd" if op.grid.n_leaves <= 4096 else "power"
    if method == "svd":
        return float(np.linalg.svd(M, compute_uv=False)[0]) if M.size else 0.0
    return power_iteration(M, tol=tol)


def write_matrix(path, A: np.ndarray) -> None:
    """Little-endian dump: uint64 rows, uint64 cols, then row-major float64 entries."""
    A = np.ascontiguousarray(A, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<QQ", A.shape[0], A.shape[1]))
        fh.write(A.tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        rows, cols = struct.unpack("<QQ", fh.read(16))
        return np.frombuffer(fh.read(), dtype="<f8").reshape(rows, cols).copy()
