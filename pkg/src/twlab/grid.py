"""Finite dyadic tree over a root cube.

A cube is addressed by ``(level, index)`` where ``index`` is an integer
vector; its geometry is always derived from the owning :class:`Grid`.
Cubes are half-open, ``[a, a + side)^n``.  Leaves are numbered row-major
(C order) over their index vectors.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np


class GridError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Cube:
    level: int
    index: tuple[int, ...]

    def __repr__(self) -> str:
        return f"Cube({self.level}, {self.index})"


@dataclass(frozen=True)
class GoodnessConfig:
    """Parameters (r, eps, tau, rho) for deep embedding and shifted coronas."""

    r: int = 1
    eps: float = 0.6
    tau: int = 2
    rho: int = 4

    def validate(self, kappa: int | None = None, dim: int = 1, lam: float = 0.0) -> None:
        if self.r < 1 or self.tau < 1 or self.rho < 1:
            raise GridError("r, tau, rho must be positive integers")
        if not 0.0 < self.eps < 1.0:
            raise GridError("eps must lie in (0, 1)")
        if self.tau <= self.r:
            raise GridError(f"need tau > r (tau={self.tau}, r={self.r})")
        if self.rho <= self.r + self.tau:
            raise GridError(f"need rho > r + tau (rho={self.rho}, r+tau={self.r + self.tau})")
        if kappa is not None:
            bound = kappa / (dim + kappa - lam)
            if self.eps >= bound:
                raise GridError(f"need eps < kappa/(n+kappa-lambda) = {bound:.6g}, got {self.eps}")


@dataclass(frozen=True)
class Grid:
    dim: int
    depth: int
    origin: tuple[float, ...] = None  # type: ignore[assignment]
    side: float = 1.0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise GridError("dimension must be 1 or 2")
        if self.depth < 1:
            raise GridError("depth must be positive")
        if self.side <= 0:
            raise GridError("root side must be positive")
        if self.origin is None:
            object.__setattr__(self, "origin", (0.0,) * self.dim)
        else:
            object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        if len(self.origin) != self.dim:
            raise GridError("origin length must equal dimension")

    # ------------------------------------------------------------------ sizes
    @property
    def leaves_per_side(self) -> int:
        return 1 << self.depth

    @property
    def n_leaves(self) -> int:
        return 1 << (self.dim * self.depth)

    @property
    def leaf_side(self) -> float:
        return self.side / self.leaves_per_side

    @property
    def leaf_diameter(self) -> float:
        return self.leaf_side * np.sqrt(self.dim)

    @property
    def root_diameter(self) -> float:
        return self.side * np.sqrt(self.dim)

    @property
    def root(self) -> Cube:
        return Cube(0, (0,) * self.dim)

    def level_count(self, level: int) -> int:
        return 1 << (self.dim * level)

    @cached_property
    def level_offsets(self) -> np.ndarray:
        counts = [self.level_count(l) for l in range(self.depth + 1)]
        return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    @property
    def n_cubes(self) -> int:
        return int(self.level_offsets[-1])

    # --------------------------------------------------------------- geometry
    def side_of(self, cube: Cube) -> float:
        return self.side / (1 << cube.level)

    def lower(self, cube: Cube) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(cube.index, dtype=float) * self.side_of(cube)

    def center(self, cube: Cube) -> np.ndarray:
        return self.lower(cube) + 0.5 * self.side_of(cube)

    def volume(self, cube: Cube) -> float:
        return self.side_of(cube) ** self.dim

    def is_leaf(self, cube: Cube) -> bool:
        return cube.level == self.depth

    def check(self, cube: Cube) -> None:
        if not 0 <= cube.level <= self.depth or len(cube.index) != self.dim:
            raise GridError(f"{cube!r} is not a cube of this grid")
        m = 1 << cube.level
        if any(not 0 <= k < m for k in cube.index):
            raise GridError(f"{cube!r} index out of range")

    # ------------------------------------------------------------------- tree
    @cached_property
    def _offsets(self) -> list[tuple[int, ...]]:
        return list(itertools.product((0, 1), repeat=self.dim))

    def children(self, cube: Cube) -> list[Cube]:
        if cube.level >= self.depth:
            raise GridError(f"leaf {cube!r} has no children")
        return [
            Cube(cube.level + 1, tuple(2 * k + o for k, o in zip(cube.index, off)))
            for off in self._offsets
        ]

    def parent(self, cube: Cube) -> Cube:
        if cube.level == 0:
            raise GridError("root has no parent")
        return Cube(cube.level - 1, tuple(k >> 1 for k in cube.index))

    def ancestor(self, cube: Cube, level: int) -> Cube:
        shift = cube.level - level
        if shift < 0:
            raise GridError("ancestor level below cube level")
        return Cube(level, tuple(k >> shift for k in cube.index))

    def ancestors(self, cube: Cube) -> list[Cube]:
        """Strict ancestors, nearest first."""
        return [self.ancestor(cube, l) for l in range(cube.level - 1, -1, -1)]

    def grandchildren(self, cube: Cube, m: int) -> list[Cube]:
        out = [cube]
        for _ in range(m):
            out = [c for q in out for c in self.children(q)]
        return out

    def contains(self, big: Cube, small: Cube) -> bool:
        if small.level < big.level:
            return False
        return self.ancestor(small, big.level) == big

    def cubes(self, level: int) -> list[Cube]:
        m = 1 << level
        return [Cube(level, idx) for idx in itertools.product(range(m), repeat=self.dim)]

    def all_cubes(self) -> list[Cube]:
        """Every tree cube, top-down by level and row-major within a level."""
        return [c for l in range(self.depth + 1) for c in self.cubes(l)]

    def subtree(self, cube: Cube) -> list[Cube]:
        out = []
        for l in range(cube.level, self.depth + 1):
            s = l - cube.level
            base = [k << s for k in cube.index]
            ranges = [range(b, b + (1 << s)) for b in base]
            out.extend(Cube(l, idx) for idx in itertools.product(*ranges))
        return out

    # ------------------------------------------------------------- numbering
    def cube_id(self, cube: Cube) -> int:
        m = 1 << cube.level
        flat = 0
        for k in cube.index:
            flat = flat * m + k
        return int(self.level_offsets[cube.level]) + flat

    def cube_from_id(self, cid: int) -> Cube:
        level = int(np.searchsorted(self.level_offsets, cid, side="right") - 1)
        flat = cid - int(self.level_offsets[level])
        m = 1 << level
        idx = []
        for _ in range(self.dim):
            idx.append(flat % m)
            flat //= m
        return Cube(level, tuple(reversed(idx)))

    @cached_property
    def cube_list(self) -> list[Cube]:
        return [self.cube_from_id(i) for i in range(self.n_cubes)]

    @cached_property
    def parent_ids(self) -> np.ndarray:
        out = np.full(self.n_cubes, -1, dtype=np.int64)
        for c in self.cube_list[1:]:
            out[self.cube_id(c)] = self.cube_id(self.parent(c))
        return out

    @cached_property
    def child_ids(self) -> np.ndarray:
        """(n_nonleaf_cubes, 2**dim) ids of children, indexed by cube id."""
        n_inner = int(self.level_offsets[self.depth])
        out = np.empty((n_inner, 1 << self.dim), dtype=np.int64)
        for cid in range(n_inner):
            out[cid] = [self.cube_id(ch) for ch in self.children(self.cube_list[cid])]
        return out

    @cached_property
    def levels(self) -> np.ndarray:
        return np.repeat(np.arange(self.depth + 1), np.diff(self.level_offsets))

    def leaf_ids(self, cube: Cube) -> np.ndarray:
        """Flat (row-major) leaf numbers inside ``cube``."""
        return self._leaf_ids[self.cube_id(cube)]

    @cached_property
    def _leaf_ids(self) -> list[np.ndarray]:
        m = self.leaves_per_side
        grid_ids = np.arange(self.n_leaves).reshape((m,) * self.dim)
        out = []
        for c in self.cube_list:
            s = 1 << (self.depth - c.level)
            sl = tuple(slice(k * s, (k + 1) * s) for k in c.index)
            out.append(grid_ids[sl].ravel())
        return out

    @cached_property
    def leaf_centers(self) -> np.ndarray:
        """(n_leaves, dim) leaf centers in row-major order."""
        m = self.leaves_per_side
        axes = [self.origin[d] + (np.arange(m) + 0.5) * self.leaf_side for d in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)

    @cached_property
    def leaf_multi_index(self) -> np.ndarray:
        m = self.leaves_per_side
        idx = np.indices((m,) * self.dim).reshape(self.dim, -1).T
        return idx

    def leaf_of_point(self, x) -> int:
        x = np.asarray(x, dtype=float)
        k = np.floor((x - np.asarray(self.origin)) / self.leaf_side).astype(int)
        k = np.clip(k, 0, self.leaves_per_side - 1)
        return int(np.ravel_multi_index(tuple(k), (self.leaves_per_side,) * self.dim))

    def overlap_fractions(self, lo, hi) -> np.ndarray:
        """Fraction of each leaf's volume inside the box [lo, hi)."""
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        m = self.leaves_per_side
        h = self.leaf_side
        out = None
        for d in range(self.dim):
            edges = self.origin[d] + np.arange(m + 1) * h
            frac = np.clip(np.minimum(hi[d], edges[1:]) - np.maximum(lo[d], edges[:-1]), 0.0, None) / h
            out = frac if out is None else np.multiply.outer(out, frac)
        return out.ravel()

    def dilate(self, cube: Cube, factor: float) -> tuple[np.ndarray, float]:
        """Concentric dilate as (lower corner, side); not clipped."""
        s = self.side_of(cube) * factor
        return self.center(cube) - 0.5 * s, s

    # ------------------------------------------------------------- embedding
    def boundary_distance(self, inner: Cube, outer: Cube) -> float:
        """Distance from ``inner`` to the union of the children's boundaries of ``outer``.

        For a subcube this is the same in the sup-norm and the Euclidean
        metric: the nearest point always lies on a single face hyperplane.
        """
        a = self.lower(outer)
        ell = self.side_of(outer)
        b = self.lower(inner)
        s = self.side_of(inner)
        best = np.inf
        for i in range(self.dim):
            for c in (a[i], a[i] + 0.5 * ell, a[i] + ell):
                d = max(0.0, b[i] - c, c - (b[i] + s))
                best = min(best, d)
        return float(best)

    def is_deeply_embedded(self, inner: Cube, outer: Cube, r: int, eps: float) -> bool:
        if not self.contains(outer, inner):
            return False
        if inner.level - outer.level < r:
            return False
        lj, li = self.side_of(inner), self.side_of(outer)
        return self.boundary_distance(inner, outer) >= 2.0 * lj**eps * li ** (1.0 - eps)

    def is_good(self, cube: Cube, cfg: GoodnessConfig) -> bool:
        for big in self.ancestors(cube):
            # side-length clause: l(J) >= 2^{1-r} l(L)
            if cube.level - big.level <= cfg.r - 1:
                continue
            if not self.is_deeply_embedded(cube, big, cfg.r, cfg.eps):
                return False
        return True

    def good_mask(self, cfg: GoodnessConfig) -> np.ndarray:
        return np.array([self.is_good(c, cfg) for c in self.cube_list])

    def to_dict(self) -> dict:
        return {"dimension": self.dim, "depth": self.depth, "origin": list(self.origin), "side": self.side}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(int(d["dimension"]), int(d["depth"]), tuple(d.get("origin", [0.0] * int(d["dimension"]))),
                   float(d.get("side", 1.0)))
