"""Multi-indices, normalized monomials m_Q^beta and affine frame changes.

A polynomial on a cube Q is stored by its coefficients in the frame
m_Q^beta(x) = ((x - c_Q) / l(Q))^beta, beta ranging over a total-degree set.
"""
from __future__ import annotations

import itertools
from functools import lru_cache
from math import comb

import numpy as np


class MonomialSet:
    """All multi-indices with |beta| < degree, in graded-lex order."""

    def __init__(self, dim: int, degree: int):
        if degree < 1:
            raise ValueError("degree bound must be >= 1")
        self.dim = dim
        self.degree = degree
        betas = [b for b in itertools.product(range(degree), repeat=dim) if sum(b) < degree]
        betas.sort(key=lambda b: (sum(b), tuple(-v for v in b)))
        self.betas: list[tuple[int, ...]] = betas
        self.array = np.array(betas, dtype=np.int64).reshape(len(betas), dim)
        self.index = {b: i for i, b in enumerate(betas)}

    def __len__(self) -> int:
        return len(self.betas)

    def __repr__(self) -> str:
        return f"MonomialSet(dim={self.dim}, degree<{self.degree}, size={len(self)})"


@lru_cache(maxsize=None)
def monomials(dim: int, degree: int) -> MonomialSet:
    return MonomialSet(dim, degree)


def unit_moments(max_deg: int) -> np.ndarray:
    """c[b] = integral of t^b over [-1/2, 1/2]."""
    b = np.arange(max_deg + 1)
    return np.where(b % 2 == 0, 0.5**b / (b + 1.0), 0.0)


def leaf_gram(rows: MonomialSet, cols: MonomialSet) -> np.ndarray:
    """Integral of m^beta m^gamma over a unit-volume leaf in its own frame."""
    c = unit_moments(rows.degree + cols.degree)
    s = rows.array[:, None, :] + cols.array[None, :, :]
    return np.prod(c[s], axis=-1)


def shift_matrix(mset: MonomialSet, lam: float, s) -> np.ndarray:
    """T with m_big^beta = sum_gamma T[beta, gamma] m_small^gamma.

    Here (x - c_big)/l_big = lam * (x - c_small)/l_small + s componentwise,
    so each factor expands binomially.  Restricting a polynomial with
    coefficients a (big frame) to the small cube gives T.T @ a.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    p = len(mset)
    T = np.zeros((p, p))
    for i, beta in enumerate(mset.betas):
        for j, gamma in enumerate(mset.betas):
            if any(g > b for g, b in zip(gamma, beta)):
                continue
            v = 1.0
            for b, g, sd in zip(beta, gamma, s):
                v *= comb(b, g) * lam**g * sd ** (b - g)
            T[i, j] = v
    return T


@lru_cache(maxsize=None)
def child_shift_matrices(dim: int, degree: int) -> tuple[np.ndarray, ...]:
    """Parent-to-child shift matrices for the 2^dim children in lex order."""
    ms = monomials(dim, degree)
    out = []
    for off in itertools.product((0, 1), repeat=dim):
        s = [(o - 0.5) / 2.0 for o in off]
        out.append(shift_matrix(ms, 0.5, s))
    return tuple(out)


def product_table(a: MonomialSet, b: MonomialSet, out: MonomialSet) -> np.ndarray:
    """idx[i, j] = index of beta_i + gamma_j in ``out``."""
    tab = np.empty((len(a), len(b)), dtype=np.int64)
    for i, x in enumerate(a.betas):
        for j, y in enumerate(b.betas):
            tab[i, j] = out.index[tuple(u + v for u, v in zip(x, y))]
    return tab


def multiply(pa: np.ndarray, a: MonomialSet, pb: np.ndarray, b: MonomialSet, out: MonomialSet) -> np.ndarray:
    """Product of polynomials expressed in the same frame; works on trailing axis."""
    tab = product_table(a, b, out)
    res = np.zeros(np.broadcast_shapes(pa.shape[:-1], pb.shape[:-1]) + (len(out),))
    prod = pa[..., :, None] * pb[..., None, :]
    for i in range(len(a)):
        for j in range(len(b)):
            res[..., tab[i, j]] += prod[..., i, j]
    return res


def embed(coeffs: np.ndarray, small: MonomialSet, big: MonomialSet) -> np.ndarray:
    """Zero-pad coefficients from a smaller degree set into a larger one."""
    out = np.zeros(coeffs.shape[:-1] + (len(big),))
    for i, b in enumerate(small.betas):
        out[..., big.index[b]] = coeffs[..., i]
    return out


def evaluate(coeffs: np.ndarray, mset: MonomialSet, t: np.ndarray) -> np.ndarray:
    """Evaluate sum_beta coeffs[beta] t^beta at frame points t of shape (..., dim)."""
    t = np.asarray(t, dtype=float)
    vals = np.ones(t.shape[:-1] + (len(mset),))
    for i, b in enumerate(mset.betas):
        for d, e in enumerate(b):
            if e:
                vals[..., i] = vals[..., i] * t[..., d] ** e
    return vals @ coeffs
