"""Piecewise-constant measures on grid leaves, doubling diagnostics and generators."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .grid import Cube, Grid


class MeasureError(ValueError):
    pass


@dataclass
class MeasureStats:
    c_doub: float
    theta_rev: float
    argmax: tuple | None  # (lower corner in leaf units, side in leaf units)
    n_cubes: int = 0


@dataclass(frozen=True, eq=False)
class Measure:
    """Density constant on each leaf times Lebesgue measure."""

    grid: Grid
    densities: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(np.asarray(self.densities, dtype=float).ravel())
        if d.size != self.grid.n_leaves:
            raise MeasureError(f"expected {self.grid.n_leaves} densities, got {d.size}")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise MeasureError("densities must be finite and nonnegative")
        d.setflags(write=False)
        object.__setattr__(self, "densities", d)

    @classmethod
    def lebesgue(cls, grid: Grid, scale: float = 1.0) -> "Measure":
        return cls(grid, np.full(grid.n_leaves, float(scale)))

    @cached_property
    def leaf_volume(self) -> float:
        return self.grid.leaf_side ** self.grid.dim

    @cached_property
    def leaf_masses(self) -> np.ndarray:
        return self.densities * self.leaf_volume

    @cached_property
    def total(self) -> float:
        return float(self.leaf_masses.sum())

    @cached_property
    def cube_masses(self) -> np.ndarray:
        """Mass of every tree cube, indexed by grid cube id (bottom-up sums)."""
        g = self.grid
        out = np.empty(g.n_cubes)
        m = g.leaves_per_side
        cur = self.leaf_masses.reshape((m,) * g.dim)
        for level in range(g.depth, -1, -1):
            lo, hi = g.level_offsets[level], g.level_offsets[level + 1]
            out[lo:hi] = cur.ravel()
            if level:
                k = cur.shape[0] // 2
                cur = cur.reshape(sum(((k, 2) for _ in range(g.dim)), ())).sum(axis=tuple(range(1, 2 * g.dim, 2)))
        return out

    def cube_mass(self, cube: Cube) -> float:
        return float(self.cube_masses[self.grid.cube_id(cube)])

    @cached_property
    def _sat(self) -> np.ndarray:
        """Summed-area table over leaf masses, shape (m+1,)*dim."""
        m = self.grid.leaves_per_side
        a = self.leaf_masses.reshape((m,) * self.grid.dim)
        for ax in range(self.grid.dim):
            a = np.cumsum(a, axis=ax)
        return np.pad(a, [(1, 0)] * self.grid.dim)

    def _cum(self, pts: np.ndarray) -> np.ndarray:
        """Mass of [origin, p) for points p given in leaf units (clipped), multilinear in cells."""
        m = self.grid.leaves_per_side
        pts = np.clip(pts, 0.0, m)
        fl = np.minimum(np.floor(pts).astype(np.int64), m - 1)
        fr = pts - fl
        out = np.zeros(pts.shape[:-1])
        for corner in itertools.product((0, 1), repeat=self.grid.dim):
            w = np.ones(pts.shape[:-1])
            idx = []
            for d, c in enumerate(corner):
                w = w * (fr[..., d] if c else 1.0 - fr[..., d])
                idx.append(fl[..., d] + c)
            out += w * self._sat[tuple(idx)]
        return out

    def box_mass_units(self, lo: np.ndarray, side: np.ndarray) -> np.ndarray:
        """Vectorised mass of boxes [lo, lo+side)^n given in leaf units (clipped to root)."""
        lo = np.asarray(lo, dtype=float)
        side = np.asarray(side, dtype=float)
        if lo.ndim == 1 and self.grid.dim == 1:
            lo = lo[:, None]
        out = 0.0
        for corner in itertools.product((0, 1), repeat=self.grid.dim):
            p = lo + np.asarray(corner) * side[..., None]
            sign = (-1) ** (self.grid.dim - sum(corner))
            out = out + sign * self._cum(p)
        return out

    def mass(self, lo, side: float, *, return_clipped: bool = False):
        """Exact mass of the cube [lo, lo+side)^n intersected with the root.

        Faces must lie on the half-leaf lattice (this covers the dilates
        2Q and 3Q of tree cubes).
        """
        g = self.grid
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        h = g.leaf_side
        u_lo = (lo - np.asarray(g.origin)) / h
        u_side = side / h
        for v in list(u_lo) + [u_side]:
            if abs(2 * v - round(2 * v)) > 1e-9:
                raise MeasureError("off-lattice cube: faces must lie on the half-leaf lattice")
        u_lo = np.round(2 * u_lo) / 2
        u_side = round(2 * u_side) / 2
        clipped = bool(np.any(u_lo < 0) or np.any(u_lo + u_side > g.leaves_per_side))
        val = float(self.box_mass_units(u_lo[None, :], np.array([u_side]))[0])
        val = max(val, 0.0)
        return (val, clipped) if return_clipped else val

    def dilate_mass(self, cube: Cube, factor: float, *, return_clipped: bool = False):
        lo, s = self.grid.dilate(cube, factor)
        return self.mass(lo, s, return_clipped=return_clipped)

    def scaled(self, c: float) -> "Measure":
        return Measure(self.grid, self.densities * c)

    # -------------------------------------------------------------- io
    def to_dict(self) -> dict:
        d = self.grid.to_dict()
        d["densities"] = [float(v) for v in self.densities]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Measure":
        for key in ("dimension", "depth", "densities"):
            if key not in d:
                raise MeasureError(f"measure file missing field {key!r}")
        grid = Grid.from_dict(d)
        dens = np.asarray(d["densities"], dtype=float)
        if dens.size != grid.n_leaves:
            raise MeasureError(f"densities length {dens.size} != 2^(nD) = {grid.n_leaves}")
        return cls(grid, dens)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Measure":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def doubling_stats(mu: Measure, *, n_rev_samples: int = 2000, seed: int = 0) -> MeasureStats:
    """Doubling constant over all lattice cubes Q with 2Q inside the root.

    The reverse-doubling exponent is the largest theta with
    |sQ| <= s^theta |Q| on sampled dyadic sub-cubes sQ sharing Q's center.
    """
    if mu.total <= 0:
        raise MeasureError("measure has zero total mass")
    g = mu.grid
    m = g.leaves_per_side
    best, arg, count = 0.0, None, 0
    for s in range(1, m // 2 + 1):
        # 2Q = [a - s/2, a + 3s/2) must sit inside [0, m)
        lo_range = np.arange((s + 1) // 2, int(np.floor(m - 1.5 * s)) + 1)
        if lo_range.size == 0:
            continue
        lows = np.stack(np.meshgrid(*([lo_range] * g.dim), indexing="ij"), axis=-1).reshape(-1, g.dim)
        lows = lows.astype(float)
        q = mu.box_mass_units(lows, np.full(len(lows), float(s)))
        q2 = mu.box_mass_units(lows - s / 2.0, np.full(len(lows), 2.0 * s))
        count += len(lows)
        pos = q > 0
        ratio = np.where(q2 > 0, np.inf, 0.0)
        ratio[pos] = q2[pos] / q[pos]
        k = int(np.argmax(ratio))
        if ratio[k] > best:
            best, arg = float(ratio[k]), (tuple(int(v) for v in lows[k]), s)
    theta = reverse_doubling_exponent(mu, n_samples=n_rev_samples, seed=seed)
    return MeasureStats(c_doub=best, theta_rev=theta, argmax=arg, n_cubes=count)


def reverse_doubling_exponent(mu: Measure, n_samples: int = 2000, seed: int = 0) -> float:
    g = mu.grid
    rng = np.random.default_rng(seed)
    cubes = np.arange(g.n_cubes)
    cubes = cubes[g.levels[cubes] < g.depth]
    masses = mu.cube_masses
    theta = np.inf
    picks = rng.choice(cubes, size=min(n_samples, cubes.size), replace=False)
    for cid in np.sort(picks):
        q = g.cube_list[cid]
        mq = masses[cid]
        if mq <= 0:
            continue
        for j in range(1, g.depth - q.level + 1):
            s = 2.0 ** -j
            ms = mu.dilate_mass(q, s)
            if ms <= 0:
                theta = 0.0
                continue
            theta = min(theta, np.log(ms / mq) / np.log(s))
    return float(max(0.0, theta)) if np.isfinite(theta) else 0.0


def random_doubling(grid: Grid, beta: float, seed: int) -> Measure:
    """Martingale measure: every cube splits its mass among children with fractions >= beta.

    Fractions are beta + (1 - 2^n beta) * w with w uniform on the simplex
    (normalised exponentials).  Randomness comes from numpy's PCG64 seeded
    with ``seed``; cubes are visited top-down in row-major order so the
    stream is reproducible.
    """
    k = 1 << grid.dim
    if not 0 < beta <= 1.0 / k + 1e-15:
        raise MeasureError(f"beta must lie in (0, 2^-n] = (0, {1.0 / k}], got {beta}")
    rng = np.random.default_rng(seed)
    mass = np.ones((1,) * grid.dim)
    for level in range(grid.depth):
        shape = mass.shape
        e = rng.standard_exponential(size=shape + (k,))
        w = e / e.sum(axis=-1, keepdims=True)
        frac = beta + (1.0 - k * beta) * w
        frac = frac.reshape(shape + (2,) * grid.dim)
        child = mass.reshape(shape + (1,) * grid.dim) * frac
        # interleave (i, o) -> 2 i + o along each axis
        order = [ax for d in range(grid.dim) for ax in (d, grid.dim + d)]
        child = child.transpose(order).reshape(tuple(2 * s for s in shape))
        mass = child
    dens = mass.ravel() / grid.leaf_side**grid.dim
    return Measure(grid, dens)
